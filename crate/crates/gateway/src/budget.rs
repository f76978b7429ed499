//! Caps the number of backend calls in flight across all requests.

use std::sync::Arc;

use async_trait::async_trait;
use tokio::sync::Semaphore;
use unlearn_core::backend::{JudgeProbe, SamplingInfo, TokenLogProbs};
use unlearn_core::{Backend, BackendError, ChatPrompt, GenerationParams, Route};

pub struct BudgetedBackend {
    inner: Arc<dyn Backend>,
    permits: Arc<Semaphore>,
}

impl BudgetedBackend {
    pub fn new(inner: Arc<dyn Backend>, max_in_flight: usize) -> Self {
        Self {
            inner,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    async fn permit(&self) -> Result<tokio::sync::SemaphorePermit<'_>, BackendError> {
        self.permits
            .acquire()
            .await
            .map_err(|_| BackendError::Transport("request budget closed".into()))
    }
}

#[async_trait]
impl Backend for BudgetedBackend {
    async fn generate(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let _p = self.permit().await?;
        self.inner.generate(route, prompt, params).await
    }

    async fn continue_with_prefix(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        prefix: &str,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let _p = self.permit().await?;
        self.inner
            .continue_with_prefix(route, prompt, prefix, params)
            .await
    }

    async fn judge_probe(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        prefix: &str,
        top_n: u32,
    ) -> Result<JudgeProbe, BackendError> {
        let _p = self.permit().await?;
        self.inner.judge_probe(route, prompt, prefix, top_n).await
    }

    async fn score_sequence(
        &self,
        route: Route,
        prompt: &str,
        target: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        let _p = self.permit().await?;
        self.inner.score_sequence(route, prompt, target).await
    }

    fn sampling_info(&self) -> SamplingInfo {
        self.inner.sampling_info()
    }
}
