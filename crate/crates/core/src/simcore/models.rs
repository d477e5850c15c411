use serde::{Deserialize, Serialize};

use super::time::{period_count, periodic, SimTime};
use super::SimError;
use crate::ids::AppId;
use crate::kmlink::KmRole;

/// AES keys are always 256 bits.
pub const AES_KEY_BITS: u32 = 256;

/// A QKD link emitting raw keys at a constant rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkdLinkModel {
    pub key_rate_bps: f64,
    pub key_size_bytes: usize,
    pub start: SimTime,
    pub stop: SimTime,
}

impl QkdLinkModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.key_rate_bps.is_finite() && self.key_rate_bps > 0.0) {
            return Err(SimError::invalid("quantum.key_rate", "must be positive"));
        }
        if self.key_size_bytes == 0 {
            return Err(SimError::invalid("quantum.key_size_bytes", "must be positive"));
        }
        if self.stop < self.start {
            return Err(SimError::invalid("quantum.stop_s", "precedes start"));
        }
        Ok(())
    }

    fn bits(&self) -> u64 {
        self.key_size_bytes as u64 * 8
    }

    /// Number of raw keys emitted over `[start, stop]`.
    pub fn emission_count(&self) -> u64 {
        period_count(self.start, self.stop, self.bits(), self.key_rate_bps)
    }

    /// Time of emission `k`, counting from 1.
    pub fn emission_time(&self, k: u64) -> SimTime {
        periodic(self.start, k, self.bits(), self.key_rate_bps)
    }

    pub fn total_bytes(&self) -> u64 {
        self.emission_count() * self.key_size_bytes as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encryption {
    Otp,
    Aes,
}

/// A sending application attached to one key manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppModel {
    pub id: AppId,
    pub side: KmRole,
    pub packet_size_bytes: usize,
    pub data_rate_bps: f64,
    pub encryption: Encryption,
    pub aes_lifetime_bytes: usize,
    pub keys_per_query: usize,
    pub hold: SimTime,
    /// Round trip of one GET_KEY: a backlogged application issues its next
    /// request this long after the previous one was answered.
    #[serde(default)]
    pub request_gap: SimTime,
    pub start: SimTime,
    pub stop: SimTime,
}

impl AppModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let field = |name: &str| format!("service.{}", name);
        if self.packet_size_bytes == 0 {
            return Err(SimError::invalid(&field("packet_size_bytes"), "must be positive"));
        }
        if !(self.data_rate_bps.is_finite() && self.data_rate_bps > 0.0) {
            return Err(SimError::invalid(&field("data_rate_bps"), "must be positive"));
        }
        if self.keys_per_query == 0 {
            return Err(SimError::invalid(&field("keys_per_query"), "must be positive"));
        }
        if self.hold == SimTime::ZERO {
            return Err(SimError::invalid(&field("hold_time_s"), "must be positive"));
        }
        if self.encryption == Encryption::Aes && self.aes_lifetime_bytes == 0 {
            return Err(SimError::invalid(&field("aes_lifetime_bytes"), "must be positive"));
        }
        if self.stop < self.start {
            return Err(SimError::invalid(&field("stop_s"), "precedes start"));
        }
        Ok(())
    }

    fn packet_bits(&self) -> u64 {
        self.packet_size_bytes as u64 * 8
    }

    pub fn packet_count(&self) -> u64 {
        period_count(self.start, self.stop, self.packet_bits(), self.data_rate_bps)
    }

    /// Time of packet `k`, counting from 1.
    pub fn packet_time(&self, k: u64) -> SimTime {
        periodic(self.start, k, self.packet_bits(), self.data_rate_bps)
    }

    /// Size of each requested key: the packet size for one-time pad, 256 bits for AES.
    pub fn key_size_bits(&self) -> u32 {
        match self.encryption {
            Encryption::Otp => self.packet_size_bytes as u32 * 8,
            Encryption::Aes => AES_KEY_BITS,
        }
    }

    /// Packets one key protects.
    pub fn packets_per_key(&self) -> u64 {
        match self.encryption {
            Encryption::Otp => 1,
            Encryption::Aes => (self.aes_lifetime_bytes / self.packet_size_bytes).max(1) as u64,
        }
    }
}

/// Key rate provisioned for `number` applications of `rate` bps each with
/// headroom `a`: `number * rate * (1 + a)`.
pub fn provision_key_rate(number: usize, rate_bps: f64, a: f64) -> Result<f64, SimError> {
    if number == 0 {
        return Err(SimError::invalid("number", "must be positive"));
    }
    if !(rate_bps.is_finite() && rate_bps > 0.0) {
        return Err(SimError::invalid("rate", "must be positive"));
    }
    if !(a.is_finite() && a >= 0.0) {
        return Err(SimError::invalid("a", "must be non-negative"));
    }
    Ok(number as f64 * rate_bps * (1.0 + a))
}
