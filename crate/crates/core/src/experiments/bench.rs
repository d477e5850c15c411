use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BenchSpec, Cell, ExperimentConfig};
use super::metrics::{TimingKey, TimingTable};
use super::ExperimentError;
use crate::ids::{stream_rng, AppId, Stream};
use crate::keystore::SupplyError;
use crate::kmlink::{KmEvent, KmPair, KmRole, KmSettings, SupplyRequest};

/// One request of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub side: KmRole,
    pub size_bits: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub timing: TimingTable,
    /// Digest of the request sequence; equal across designs for one run.
    pub request_hash: [u8; 32],
}

/// The sweep's requests for `run`: every (size, count) cell `repeats`
/// times, shuffled, with sides alternating.
pub fn sweep_requests(spec: &BenchSpec, seed: u64, run: u64) -> Vec<SweepRequest> {
    let mut cells = Vec::new();
    for _ in 0..spec.repeats {
        for &size_bits in &spec.sizes_bits {
            for &count in &spec.keys_per_query {
                cells.push((size_bits, count));
            }
        }
    }
    cells.shuffle(&mut stream_rng(seed, run, Stream::Bench));
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (size_bits, count))| SweepRequest {
            side: if i % 2 == 0 { KmRole::Master } else { KmRole::Slave },
            size_bits,
            count,
        })
        .collect()
}

struct Feeder {
    rng: ChaCha8Rng,
    block_bytes: usize,
    blocks: usize,
    stream: u64,
}

impl Feeder {
    fn refill(&mut self, pair: &mut KmPair) -> Result<(), ExperimentError> {
        let mut raw = vec![0u8; self.block_bytes];
        for _ in 0..self.blocks {
            self.rng.fill_bytes(&mut raw);
            pair.ingest(&raw, self.stream)?;
            self.stream += 1;
        }
        pair.maintain()?;
        Ok(())
    }
}

const MAX_RETRIES: usize = 16;

/// Times every sweep request of `run` on a freshly warmed key-manager pair.
/// Stores are replenished outside the timed span whenever a request finds
/// them short.
pub fn run_sweep(
    settings: KmSettings,
    spec: &BenchSpec,
    block_bytes: usize,
    seed: u64,
    run: u64,
) -> Result<SweepOutcome, ExperimentError> {
    let requests = sweep_requests(spec, seed, run);
    let request_hash =
        Sha256::digest(bincode::serialize(&requests).expect("in-memory serialization cannot fail")).into();
    let design = settings.design;
    let default_bits = (settings.default_key_size_bytes * 8) as u32;
    // Enough raw material to restore both purpose stores several times over.
    let blocks = (4 * settings.working_set_bytes).div_ceil(block_bytes).max(1);
    let mut pair = KmPair::new(settings, seed, run)?;
    let mut feeder = Feeder {
        rng: stream_rng(seed, run, Stream::KeyMaterial),
        block_bytes,
        blocks,
        stream: 0,
    };
    feeder.refill(&mut pair)?;
    let mut timing = TimingTable::new();
    for (i, r) in requests.iter().enumerate() {
        let req = SupplyRequest {
            app: AppId((i % 2) as u32),
            size_bits: r.size_bits,
            count: r.count,
        };
        let mut tries = 0;
        let created = loop {
            tries += 1;
            if tries > MAX_RETRIES {
                return Err(ExperimentError::Bench(format!(
                    "{design}: request of {} x {} bits never succeeded",
                    r.count, r.size_bits
                )));
            }
            match pair.side(r.side).supply(&req) {
                Ok(s) => break s.created_in,
                Err(SupplyError::Unavailable) => feeder.refill(&mut pair)?,
                Err(SupplyError::NoDeque { .. }) => pair.maintain()?,
                Err(e) => return Err(ExperimentError::Bench(format!("{design}: {e}"))),
            }
        };
        for (_, event) in pair.deliver_all()? {
            if let KmEvent::Rejected { reason, .. } = event {
                return Err(ExperimentError::Bench(format!("{design}: peer rejected a supply: {reason}")));
            }
        }
        pair.maintain()?;
        let key = TimingKey {
            design,
            requested_size_bits: r.size_bits,
            keys_per_query: r.count as u32,
            default_key_size_bits: default_bits,
        };
        timing.entry(key).or_default().push(created.as_nanos() as f64 / 1000.0);
    }
    if !pair.digests_match() {
        return Err(ExperimentError::Bench(format!("{design}: stores diverged")));
    }
    Ok(SweepOutcome { timing, request_hash })
}

/// Runs the configured sweep for `cell` and `run`.
pub fn run_config_sweep(cfg: &ExperimentConfig, cell: Cell, run: u64) -> Result<Option<SweepOutcome>, ExperimentError> {
    let Some(spec) = &cfg.bench else {
        return Ok(None);
    };
    let block = cfg.quantum.key_size_bytes[0];
    run_sweep(cfg.km_settings(cell), spec, block, cfg.seed, run).map(Some)
}
