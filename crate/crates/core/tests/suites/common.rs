//! Helpers shared by the check suites. The suites are included by path from
//! this crate's test targets and from the acceptance harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smrnet_core::layers::{Init, ParamId};
use smrnet_core::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// He init for weights, then random non-trivial values for the constant
/// initialised parameters so zero biases and unit scales cannot hide errors.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    store.initialize(&mut r);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let t = store.get_mut(id).data_mut();
        if t.iter().all(|&v| v == t[0]) {
            let (lo, hi) = if t[0] == 1.0 { (0.5, 1.5) } else { (-0.3, 0.3) };
            t.iter_mut().for_each(|v| *v = r.random_range(lo..hi));
        }
    }
}

/// Registers a trainable input tensor so parameter checks also cover it.
pub fn input(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> ParamId {
    let id = store.register(name, t.shape(), Init::Constant(0.0), true);
    store.get_mut(id).data_mut().copy_from_slice(t.data());
    id
}

/// Lists a suite's checks as `CHECKS` and, under `cfg(test)`, wraps each in a
/// `#[test]` function of the same name.
macro_rules! suite {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod tests {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}

/// Proptest settings without failure files, which assume a `src/` layout.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        failure_persistence: None,
        ..proptest::test_runner::Config::with_cases(n)
    }
}
