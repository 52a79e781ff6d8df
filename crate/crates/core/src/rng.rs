//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! the scenario seed and a fixed stream number, so adding a vehicle never
//! perturbs the draws of the broker or of another vehicle. ChaCha8 output is
//! specified bit-for-bit and is identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream numbers below this value are reserved for per-vehicle telemetry.
pub const VEHICLE_STREAM_LIMIT: u64 = 1 << 32;

pub const BUS_STREAM: u64 = VEHICLE_STREAM_LIMIT;
pub const RESERVOIR_STREAM: u64 = VEHICLE_STREAM_LIMIT + 1;
/// Calibration streams occupy `CALIBRATION_STREAM_BASE + vehicle_index`.
pub const CALIBRATION_STREAM_BASE: u64 = VEHICLE_STREAM_LIMIT * 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
