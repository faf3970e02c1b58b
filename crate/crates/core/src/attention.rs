//! Question-configured convolution kernel and the attention map it induces
//! over the image feature grid.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::param_group;
use crate::tensor::Tensor;

/// Channel count and spatial extent of the question-configured kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl KernelShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel extents must be odd, got {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

param_group! {
    /// Projection from the question embedding to kernel weights.
    KernelParams => KernelVars { w_sk, b_k }
}

impl KernelParams {
    pub fn new<R: Rng + ?Sized>(shape: KernelShape, question_dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / question_dim as f64).sqrt();
        Self {
            w_sk: Tensor::uniform(&[shape.numel(), question_dim], bound, rng).requires_grad(),
            b_k: Tensor::zeros(&[shape.numel()]).requires_grad(),
        }
    }
}

param_group! {
    /// 1×1 convolution that reduces the attention-weighted feature channels.
    ReduceParams => ReduceVars { w_reduce }
}

impl ReduceParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduced: usize, rng: &mut R) -> Result<Self> {
        if reduced == 0 || reduced > channels {
            return Err(Error::Config(format!(
                "reduced channel count {reduced} must lie in 1..={channels}"
            )));
        }
        let bound = (3.0 / channels as f64).sqrt();
        Ok(Self {
            w_reduce: Tensor::uniform(&[reduced, channels, 1, 1], bound, rng).requires_grad(),
        })
    }
}

/// `k = sigmoid(W_sk s + b_k)` reshaped to `[1, C, kh, kw]`.
/// The pre-activation is returned alongside.
pub fn configure_kernel_traced(g: &mut Graph, s: Var, p: &KernelVars, shape: KernelShape) -> Result<(Var, Var)> {
    if g.shape(p.w_sk)[0] != shape.numel() {
        return Err(dim_err(
            "configure_kernel",
            format!(
                "projection yields {} weights, kernel needs {}",
                g.shape(p.w_sk)[0],
                shape.numel()
            ),
        ));
    }
    let pre = g.affine(p.w_sk, s, p.b_k)?;
    let k = g.sigmoid(pre)?;
    let k = g.reshape(k, &[1, shape.channels, shape.height, shape.width])?;
    Ok((k, pre))
}

pub fn configure_kernel(g: &mut Graph, s: Var, p: &KernelVars, shape: KernelShape) -> Result<Var> {
    configure_kernel_traced(g, s, p, shape).map(|(k, _)| k)
}

/// `m = softmax over all cells of (k * I)` for `I: [C, N, N]`, giving `[N, N]`.
pub fn attention_map(g: &mut Graph, kernel: Var, features: Var) -> Result<Var> {
    attention_map_traced(g, kernel, features).map(|(m, _)| m)
}

/// [`attention_map`], also returning the `[N, N]` logits `k * I`.
pub fn attention_map_traced(g: &mut Graph, kernel: Var, features: Var) -> Result<(Var, Var)> {
    let fs = g.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(dim_err("attention_map", format!("feature map {fs:?} is not [C, N, N]")));
    }
    let z = g.conv2d_same(features, kernel)?;
    if g.shape(z)[0] != 1 {
        return Err(dim_err("attention_map", "kernel must have a single output channel"));
    }
    let z = g.reshape(z, &[fs[1], fs[2]])?;
    Ok((g.softmax_spatial(z)?, z))
}

/// `I'_c = I_c ⊙ m` for every channel `c`.
pub fn weight_features(g: &mut Graph, features: Var, map: Var) -> Result<Var> {
    g.channel_scale(features, map)
}

/// Applies the 1×1 reduction kernel, `[C, N, N] -> [C_r, N, N]`.
pub fn reduce_channels(g: &mut Graph, weighted: Var, p: &ReduceVars) -> Result<Var> {
    let ks = g.shape(p.w_reduce);
    if ks.len() != 4 || ks[2] != 1 || ks[3] != 1 {
        return Err(dim_err("reduce_channels", format!("reduction kernel {ks:?} is not 1x1")));
    }
    g.conv2d_same(weighted, p.w_reduce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_projection_gives_half_kernel() {
        let shape = KernelShape::new(3, 3, 1).unwrap();
        let p = KernelParams {
            w_sk: Tensor::zeros(&[9, 4]),
            b_k: Tensor::zeros(&[9]),
        };
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let s = g.constant(&Tensor::vector(&[0.1, 0.2, 0.3, 0.4]));
        let k = configure_kernel(&mut g, s, &pv, shape).unwrap();
        assert_eq!(g.shape(k), &[1, 3, 3, 1]);
        assert!(g.value(k).iter().all(|&v| v == 0.5));

        let wrong = KernelShape::new(2, 1, 1).unwrap();
        assert!(configure_kernel(&mut g, s, &pv, wrong).is_err());
        assert!(KernelShape::new(3, 2, 1).is_err());
    }

    #[test]
    fn distinct_questions_give_distinct_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = KernelShape::new(4, 1, 1).unwrap();
        let p = KernelParams::new(shape, 4, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        for _ in 0..20 {
            let a = g.constant(&Tensor::uniform(&[4], 1.0, &mut rng));
            let b = g.constant(&Tensor::uniform(&[4], 1.0, &mut rng));
            let ka = configure_kernel(&mut g, a, &pv, shape).unwrap();
            let kb = configure_kernel(&mut g, b, &pv, shape).unwrap();
            assert_ne!(g.value(ka), g.value(kb));
            assert!(g.value(ka).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn kernel_gradient_wrt_question() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = KernelShape::new(2, 3, 3).unwrap();
        let p = KernelParams::new(shape, 4, &mut rng);
        let read = Tensor::uniform(&[18], 1.0, &mut rng);
        let s = Tensor::uniform(&[4], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let pv = KernelVars { w_sk: v[1], b_k: v[2] };
                let k = configure_kernel(g, v[0], &pv, shape)?;
                let k = g.flatten(k)?;
                let r = g.constant(&read);
                let d = g.mul(k, r)?;
                g.sum(d)
            },
            &[s, p.w_sk.clone(), p.b_k.clone()],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_kernel_gives_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let i = g.constant(&Tensor::uniform(&[5, 3, 3], 2.0, &mut rng));
        let k = g.constant(&Tensor::zeros(&[1, 5, 3, 3]));
        let m = attention_map(&mut g, k, i).unwrap();
        assert_eq!(g.shape(m), &[3, 3]);
        for &v in g.value(m) {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_cell_receives_the_mass() {
        // 1x1 kernel along e0; cell (2,1) carries 10·e0, all others carry e1.
        let (c, n) = (3, 3);
        let mut feats = vec![0.0; c * n * n];
        for cell in 0..n * n {
            if cell == 7 {
                feats[cell] = 10.0;
            } else {
                feats[n * n + cell] = 1.0;
            }
        }
        let mut g = Graph::new();
        let i = g.constant(&Tensor::new(&[c, n, n], feats).unwrap());
        let k = g.constant(&Tensor::new(&[1, c, 1, 1], vec![0.9, 0.0, 0.0]).unwrap());
        let m = attention_map(&mut g, k, i).unwrap();
        // z = 9 at the aligned cell and 0 elsewhere.
        let expected = 9f64.exp() / (9f64.exp() + 8.0);
        assert!((g.value(m)[7] - expected).abs() < 1e-12);
        assert!(g.value(m)[7] > 0.9);
    }

    #[test]
    fn constant_channel_does_not_move_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Tensor::uniform(&[3, 3, 3], 1.0, &mut rng);
        let mut extended = base.values().to_vec();
        extended.extend(std::iter::repeat_n(4.2, 9));
        let kv = vec![0.3, 0.7, 0.2];
        let mut kv_ext = kv.clone();
        kv_ext.push(0.6);

        let mut g = Graph::new();
        let i = g.constant(&base);
        let ie = g.constant(&Tensor::new(&[4, 3, 3], extended).unwrap());
        let k = g.constant(&Tensor::new(&[1, 3, 1, 1], kv).unwrap());
        let ke = g.constant(&Tensor::new(&[1, 4, 1, 1], kv_ext).unwrap());
        let m = attention_map(&mut g, k, i).unwrap();
        let me = attention_map(&mut g, ke, ie).unwrap();
        for (a, b) in g.value(m).iter().zip(g.value(me)) {
            assert!((a - b).abs() < 1e-12);
        }
        let wrong = g.constant(&Tensor::zeros(&[1, 2, 1, 1]));
        assert!(attention_map(&mut g, wrong, i).is_err());
    }

    #[test]
    fn weighting_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let it = Tensor::uniform(&[4, 3, 3], 1.0, &mut rng);
        let mt = Tensor::uniform(&[3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(&it);
        let m = g.constant(&mt);
        let w = weight_features(&mut g, i, m).unwrap();
        let out = g.value(w);
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    let k = (c * 3 + y) * 3 + x;
                    assert_eq!(out[k], it.values()[k] * mt.values()[y * 3 + x]);
                }
            }
        }
    }

    #[test]
    fn reduction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, cr, n) = (5, 3, 3);
        let it = Tensor::uniform(&[c, n, n], 1.0, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(&it);

        let mut sel = vec![0.0; cr * c];
        for r in 0..cr {
            sel[r * c + r] = 1.0;
        }
        let p = ReduceParams { w_reduce: Tensor::new(&[cr, c, 1, 1], sel).unwrap() };
        let pv = p.bind(&mut g);
        let out = reduce_channels(&mut g, i, &pv).unwrap();
        assert_eq!(g.value(out), &it.values()[..cr * n * n]);

        let zero = ReduceParams { w_reduce: Tensor::zeros(&[cr, c, 1, 1]) };
        let zv = zero.bind(&mut g);
        let out = reduce_channels(&mut g, i, &zv).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let rand_p = ReduceParams::new(c, cr, &mut rng).unwrap();
        let rv = rand_p.bind(&mut g);
        let out = reduce_channels(&mut g, i, &rv).unwrap();
        let w = rand_p.w_reduce.values();
        for r in 0..cr {
            for cell in 0..n * n {
                let direct: f64 = (0..c).map(|ch| w[r * c + ch] * it.values()[ch * n * n + cell]).sum();
                assert!((g.value(out)[r * n * n + cell] - direct).abs() < 1e-12);
            }
        }

        let wrong = ReduceParams { w_reduce: Tensor::zeros(&[cr, c + 1, 1, 1]) };
        let wv = wrong.bind(&mut g);
        assert!(reduce_channels(&mut g, i, &wv).is_err());
        assert!(ReduceParams::new(c, c + 1, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn attention_map_is_a_distribution(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let i = g.constant(&Tensor::uniform(&[4, 3, 3], scale, &mut rng));
            let k = g.constant(&Tensor::uniform(&[1, 4, 1, 1], 1.0, &mut rng));
            let m = attention_map(&mut g, k, i).unwrap();
            let total: f64 = g.value(m).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(g.value(m).iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn one_by_one_kernel_is_permutation_equivariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, n) = (4, 3);
            let it = Tensor::uniform(&[c, n, n], 2.0, &mut rng);
            let mut perm: Vec<usize> = (0..n * n).collect();
            perm.shuffle(&mut rng);
            let mut pv = vec![0.0; c * n * n];
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    pv[ch * n * n + dst] = it.values()[ch * n * n + src];
                }
            }
            let mut g = Graph::new();
            let k = g.constant(&Tensor::uniform(&[1, c, 1, 1], 1.0, &mut rng));
            let i = g.constant(&it);
            let ip = g.constant(&Tensor::new(&[c, n, n], pv).unwrap());
            let m = attention_map(&mut g, k, i).unwrap();
            let mp = attention_map(&mut g, k, ip).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((g.value(mp)[dst] - g.value(m)[src]).abs() < 1e-15);
            }
        }

        #[test]
        fn channel_sum_commutes_with_weighting(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let it = Tensor::uniform(&[5, 3, 3], 3.0, &mut rng);
            let mt = Tensor::uniform(&[3, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let i = g.constant(&it);
            let m = g.constant(&mt);
            let w = weight_features(&mut g, i, m).unwrap();
            for cell in 0..9 {
                let lhs: f64 = (0..5).map(|c| g.value(w)[c * 9 + cell]).sum();
                let rhs = mt.values()[cell] * (0..5).map(|c| it.values()[c * 9 + cell]).sum::<f64>();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300) + 1e-15);
            }
        }
    }
}
