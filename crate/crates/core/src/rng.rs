//! Named, seeded random substreams.
//!
//! Every random draw in the crate flows from one root seed. A substream is
//! identified by a name (`"paths"`, `"solver"`, `"init"`, ...) and an index
//! (path number, training step, ...), so any component can be re-run on its
//! own and still see exactly the same numbers, independently of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Substream `index` of the stream called `name` under `root`.
pub fn substream(root: u64, name: &str, index: u64) -> StreamRng {
    let seed = splitmix64(root ^ splitmix64(name_hash(name)));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
