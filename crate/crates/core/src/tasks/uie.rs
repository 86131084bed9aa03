//! Enhancement head, reconstruction loss and image-quality metrics.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Two-layer convolutional refiner standing in for an enhancement network:
/// `y = clamp(x + conv(relu(conv(x))))`, second layer zero-initialised.
#[derive(Clone, Debug)]
pub struct UieHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub const UIE_HIDDEN: usize = 16;

impl UieHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{prefix}conv1"), 3, UIE_HIDDEN, 3, 1, 1, rng),
            conv2: Conv2d::zeroed(store, &format!("{prefix}conv2"), UIE_HIDDEN, 3, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let d = self.conv2.forward(g, store, h)?;
        let y = g.add(x, d)?;
        Ok(g.clamp(y, T::zero(), T::one()))
    }
}

/// Normalised 1-D Gaussian of the SSIM window.
fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = num_traits::Float::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn window<T: Scalar>(channels: usize) -> Tensor<T> {
    let k = gaussian_1d();
    let mut data = Vec::with_capacity(channels * SSIM_WINDOW * SSIM_WINDOW);
    for _ in 0..channels {
        for a in k {
            for b in k {
                data.push(T::from_f64(a * b));
            }
        }
    }
    Tensor::from_vec(&[channels, 1, SSIM_WINDOW, SSIM_WINDOW], data).expect("window shape")
}

/// Mean SSIM of two `(n, c, h, w)` tensors as a graph scalar (valid
/// windows only, dynamic range 1).
pub fn ssim_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let [_, c, h, w] = g.value(a).dims4()?;
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: g.value(a).shape().to_vec(),
            right: g.value(b).shape().to_vec(),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            detail: format!("{}x{} is smaller than the {}x{} window", h, w, SSIM_WINDOW, SSIM_WINDOW),
        });
    }
    let win = g.constant(window(c));
    let blur = |g: &mut Graph<T>, x: Var| g.conv2d(x, win, None, 1, 0, true);
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;
    let (c1, c2) = (T::from_f64(SSIM_K1 * SSIM_K1), T::from_f64(SSIM_K2 * SSIM_K2));
    let two = T::from_f64(2.0);
    let l_num = g.scale(mu_ab, two);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.scale(cov, two);
    let c_num = g.add_scalar(c_num, c2);
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, c2);
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Mean SSIM over every image and channel.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    let s = ssim_graph(&mut g, va, vb)?;
    Ok(g.value(s).data()[0].to_f64())
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: a.tensor().shape().to_vec(),
            right: b.tensor().shape().to_vec(),
        });
    }
    let sse = a.tensor().data().iter().zip(b.tensor().data()).fold(0.0, |s, (&x, &y)| {
        let d = x.to_f64() - y.to_f64();
        s + d * d
    });
    let mse = sse / a.tensor().numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * num_traits::Float::log10(mse)
    })
}

/// Weighted total `λ_l1·l1 + λ_ssim·(1 − ssim)`.
pub fn uie_total(l1: f64, ssim: f64, cfg: &RunConfig) -> f64 {
    cfg.lambda_l1 * l1 + cfg.lambda_ssim * (1.0 - ssim)
}

/// Graph form of [`uie_total`] with `l1 = mean|pred − reference|`.
pub fn uie_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, reference: Var, cfg: &RunConfig) -> Result<Var> {
    let d = g.sub(pred, reference)?;
    let a = g.abs(d);
    let l1 = g.mean(a);
    let s = ssim_graph(g, pred, reference)?;
    let l1_term = g.scale(l1, T::from_f64(cfg.lambda_l1));
    let dissim = g.scale(s, -T::one());
    let dissim = g.add_scalar(dissim, T::one());
    let ssim_term = g.scale(dissim, T::from_f64(cfg.lambda_ssim));
    g.add(l1_term, ssim_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, side: usize, rng: &mut ChaCha8Rng) -> ImageTensor<f64> {
        let data = (0..n * 3 * side * side).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(Tensor::from_vec(&[n, 3, side, side], data).unwrap()).unwrap()
    }

    #[test]
    fn ssim_of_self_is_one_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(1, 16, &mut rng);
        let b = random_image(1, 16, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = ImageTensor::<f64>::new(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let b = ImageTensor::<f64>::new(Tensor::full(&[1, 3, 16, 16], 1.0)).unwrap();
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_needs_a_full_window() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(ssim_graph(&mut g, a, a).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let zeros = ImageTensor::<f64>::new(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let ones = ImageTensor::<f64>::new(Tensor::full(&[1, 3, 16, 16], 1.0)).unwrap();
        let tenth = ImageTensor::<f64>::new(Tensor::full(&[1, 3, 16, 16], 0.1)).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&ones, &ones).unwrap().is_infinite());
    }

    #[test]
    fn loss_weights() {
        let cfg = RunConfig::default();
        assert!((uie_total(0.5, 0.8, &cfg) - 0.52).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(1, 16, &mut rng);
        let b = random_image(1, 16, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
        let loss = uie_loss(&mut g, va, vb, &cfg).unwrap();
        let l1 = a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / a.tensor().numel() as f64;
        let expected = uie_total(l1, ssim(&a, &b).unwrap(), &cfg);
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
        let same = uie_loss(&mut g, va, va, &cfg).unwrap();
        assert!(g.value(same).data()[0].abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_image(1, 16, &mut rng);
        // keep every |pred − ref| away from the L1 kink
        let pred = reference.tensor().map(|r| if r > 0.5 { r - 0.2 } else { r + 0.2 });
        let cfg = RunConfig::default();
        let mut store = ParamStore::new();
        let report = crate::gradcheck::check_gradients(&mut store, &[pred], 1e-4, |g, _, v| {
            let r = g.constant(reference.tensor().clone());
            uie_loss(g, v[0], r, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
