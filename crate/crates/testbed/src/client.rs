//! HTTP client for the node-agent REST surface.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::time::Duration;

use fogbed_core::app::ContainerLimit;
use fogbed_core::netem::AgentNetworkConfig;
use serde::de::DeserializeOwned;

use crate::agent::{Ack, AgentStatus, ErrorBody, PingReport, PingRequest};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("agent at {url} unreachable: {source}")]
    Transport { url: String, source: reqwest::Error },
    #[error("agent at {url} answered {status}: {error}")]
    Agent { url: String, status: u16, error: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Agent { status, .. } => Some(*status),
            ClientError::Transport { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentClient {
    http: reqwest::Client,
    base: String,
}

impl AgentClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self::with_timeout(addr, Duration::from_secs(15))
    }

    pub fn with_timeout(addr: SocketAddr, timeout: Duration) -> Self {
        let http = reqwest::Client::builder().timeout(timeout).no_proxy().build().expect("http client");
        AgentClient { http, base: format!("http://{addr}") }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T, ClientError> {
        let url = self.base.clone();
        let resp = req.send().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        let status = resp.status();
        if status.is_success() {
            resp.json().await.map_err(|source| ClientError::Transport { url, source })
        } else {
            let error = match resp.json::<ErrorBody>().await {
                Ok(b) => b.error,
                Err(_) => status.to_string(),
            };
            Err(ClientError::Agent { url, status: status.as_u16(), error })
        }
    }

    pub async fn status(&self) -> Result<AgentStatus, ClientError> {
        self.send(self.http.get(format!("{}/status", self.base))).await
    }

    pub async fn network(&self) -> Result<AgentNetworkConfig, ClientError> {
        self.send(self.http.get(format!("{}/network", self.base))).await
    }

    pub async fn apply_network(&self, config: &AgentNetworkConfig) -> Result<Ack, ClientError> {
        self.send(self.http.put(format!("{}/network", self.base)).json(config)).await
    }

    pub async fn ping(&self, targets: Vec<IpAddr>, samples: Option<u32>) -> Result<PingReport, ClientError> {
        let body = PingRequest { targets, samples, port: None };
        self.send(self.http.post(format!("{}/ping", self.base)).json(&body)).await
    }

    pub async fn limits(&self) -> Result<BTreeMap<String, ContainerLimit>, ClientError> {
        self.send(self.http.get(format!("{}/limits", self.base))).await
    }

    pub async fn set_limits(&self, limits: &[ContainerLimit]) -> Result<BTreeMap<String, ContainerLimit>, ClientError> {
        self.send(self.http.put(format!("{}/limits", self.base)).json(limits)).await
    }
}
