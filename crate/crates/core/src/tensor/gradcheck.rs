//! Central finite-difference checks of the analytic backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, ParamStore, Result, Sequential, Tape, Tensor};
use crate::networks::{Network, NetworkSpec};

/// Probe step; small enough that ReLU kinks are rarely crossed.
pub const STEP: f64 = 1e-7;

/// Worst relative error over the checked tensors, with the tensor's name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let e = rel_err(analytic, numeric);
        if self.worst.is_empty() || !(e <= self.max_rel_err) {
            self.max_rel_err = e;
            self.worst = name.to_string();
        }
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn probe_indices(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.gen_range(0..len)).collect()
    }
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

/// Builds `specs` with seeded random parameters and input, then compares
/// input and parameter gradients of `Σ out ⊙ r` for a random `r`. At most
/// `probes` coordinates of each tensor are perturbed.
pub fn check_layers(specs: &[LayerSpec], input_shape: &[usize], seed: u64, probes: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let seq = Sequential::build(specs, &mut store, "net");
    store.init_uniform(&mut rng);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = random_tensor(&mut rng, input_shape);
    let out_shape = seq.shapes(input_shape)?.pop().unwrap_or_else(|| input_shape.to_vec());
    let r = random_tensor(&mut rng, &out_shape);
    let loss = |store: &ParamStore, x: &Tensor| -> f64 {
        match seq.forward(store, x, None) {
            Ok(y) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };

    let mut tape = Tape::new();
    seq.forward(&store, &x, Some(&mut tape))?;
    let mut grads = store.zero_grads();
    let gx = seq.backward(&store, &tape, r.clone(), &mut grads, true)?.expect("input gradient requested");

    let mut report = GradCheck::new();
    let idx = probe_indices(&mut rng, x.len(), probes);
    let mut xp = x.clone();
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let d = central(|h| {
                xp.data_mut()[i] = orig + h;
                loss(&store, &xp)
            });
            xp.data_mut()[i] = orig;
            d
        })
        .collect();
    let analytic: Vec<f64> = idx.iter().map(|&i| gx.data()[i]).collect();
    report.record("input", &analytic, &numeric);

    let mut probe = store.clone();
    for k in 0..store.len() {
        let idx = probe_indices(&mut rng, store.params()[k].value.len(), probes);
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let orig = store.params()[k].value.data()[i];
                let d = central(|h| {
                    probe.params_mut()[k].value.data_mut()[i] = orig + h;
                    loss(&probe, &x)
                });
                probe.params_mut()[k].value.data_mut()[i] = orig;
                d
            })
            .collect();
        let analytic: Vec<f64> = idx.iter().map(|&i| grads.tensors()[k].data()[i]).collect();
        report.record(&store.params()[k].name, &analytic, &numeric);
    }
    Ok(report)
}

/// Compares the parameter gradient of the squared error of a whole network
/// on one random example.
pub fn check_network(spec: NetworkSpec, seed: u64, probes: usize) -> Result<GradCheck, crate::networks::NetworkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::initialized(spec, &mut rng)?;
    for p in net.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let (c, ps) = (spec.channels(), spec.patch_size());
    let patches: Vec<Tensor> = (0..spec.landmark_count()).map(|_| random_tensor(&mut rng, &[ps, ps, c])).collect();
    let target: Vec<f64> = (0..2 * spec.landmark_count()).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let loss = |net: &Network| -> f64 {
        match net.forward(&patches) {
            Ok(y) => y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum(),
            Err(_) => f64::NAN,
        }
    };
    let (_, grads) = net.loss_and_gradients(&[(&patches, &target)])?;
    let mut report = GradCheck::new();
    let mut probe = net.clone();
    for k in 0..net.store().len() {
        let idx = probe_indices(&mut rng, net.store().params()[k].value.len(), probes);
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let orig = net.store().params()[k].value.data()[i];
                let d = central(|h| {
                    probe.store_mut().params_mut()[k].value.data_mut()[i] = orig + h;
                    loss(&probe)
                });
                probe.store_mut().params_mut()[k].value.data_mut()[i] = orig;
                d
            })
            .collect();
        let analytic: Vec<f64> = idx.iter().map(|&i| grads.tensors()[k].data()[i]).collect();
        report.record(&net.store().params()[k].name, &analytic, &numeric);
    }
    Ok(report)
}
