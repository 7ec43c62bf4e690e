//! Deterministic 64-bit word streams feeding the sampler and the noise generator.
//!
//! [`WordSource`] is a counter-mode hash: word `i` of seed `s` is the SplitMix64
//! finalizer applied to `s + (i + 1) * 0x9E3779B97F4A7C15`. It is not FALCON's
//! SHAKE256-based RNG; only the sampler's data flow matters for the attack.

/// Anything that can hand out 64-bit words to the sampler.
pub trait WordStream {
    fn next_word(&mut self) -> u64;
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded counter-hash generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSource {
    pub seed: u64,
    pub counter: u64,
}

impl WordSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Word at an arbitrary position, without advancing anything.
    #[inline]
    pub fn word_at(seed: u64, counter: u64) -> u64 {
        mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Independent sub-seed for stream `tag`, item `index` (keys, trace noise, ...).
    pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
        mix64(mix64(seed ^ mix64(tag.wrapping_add(GOLDEN_GAMMA))).wrapping_add(index))
    }

    /// Uniform double in (0, 1], built from the top 53 bits of the next word.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_word() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// A pair of independent standard normal variates (Box-Muller).
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (radius * theta.cos(), radius * theta.sin())
    }
}

impl WordStream for WordSource {
    #[inline]
    fn next_word(&mut self) -> u64 {
        let w = Self::word_at(self.seed, self.counter);
        self.counter = self.counter.wrapping_add(1);
        w
    }
}

/// Replays a fixed list of words, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedWords<'a> {
    words: &'a [u64],
    pos: usize,
}

impl<'a> ScriptedWords<'a> {
    /// Panics if `words` is empty.
    pub fn new(words: &'a [u64]) -> Self {
        assert!(!words.is_empty(), "scripted word list must not be empty");
        Self { words, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl WordStream for ScriptedWords<'_> {
    fn next_word(&mut self) -> u64 {
        let w = self.words[self.pos % self.words.len()];
        self.pos += 1;
        w
    }
}
