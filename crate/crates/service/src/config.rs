use std::time::Duration;

use keylab_core::keystore::Design;
use keylab_core::kmlink::{KmRole, KmSettings};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub role: KmRole,
    pub settings: KmSettings,
    /// Base URL of the peer key manager, e.g. `http://10.0.0.2:8080`.
    pub peer: Option<String>,
    /// SAE served by this key manager.
    pub sae_id: String,
    /// SAE served by the peer; the only valid `slave_id`/`master_id` in paths.
    pub peer_sae_id: String,
    /// Advertised to clients when key material runs out.
    pub hold_time: Duration,
    /// How long a supply waits for the peer's answer.
    pub confirm_timeout: Duration,
    pub max_key_per_request: usize,
    /// Fixed seed for key ids and UUIDs; operating-system entropy otherwise.
    pub seed: Option<u64>,
}

impl ServiceConfig {
    pub fn new(role: KmRole, design: Design, default_key_size_bytes: usize) -> Self {
        Self {
            role,
            settings: KmSettings::new(design, default_key_size_bytes),
            peer: None,
            sae_id: format!("sae-{role}"),
            peer_sae_id: format!("sae-{}", role.peer()),
            hold_time: Duration::from_millis(100),
            confirm_timeout: Duration::from_secs(5),
            max_key_per_request: 128,
            seed: None,
        }
    }

    pub fn with_peer(mut self, peer: impl Into<String>) -> Self {
        let mut p: String = peer.into();
        if !p.contains("://") {
            p = format!("http://{p}");
        }
        self.peer = Some(p.trim_end_matches('/').to_string());
        self
    }
}
