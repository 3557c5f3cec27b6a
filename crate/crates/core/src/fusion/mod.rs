//! Composition of an image embedding with a caption embedding: vector addition,
//! attention fusion, residual attention fusion, and single-modality ablations.

pub mod block;
pub mod model;
pub mod strategy;

pub use block::{AttentionBlock, BlockCache, BlockConfig, BlockGrads, BlockTensors, BLOCK_TENSOR_NAMES};
pub use model::{score, FuseTrace, FusionConfig, FusionModel, ModelGrads, TAU_MAX, TAU_MIN};
pub use strategy::{
    canonical_mode, AttentionFusion, Composition, FusionInput, FusionRegistry, FusionStrategy,
    ImageOnly, InputGrads, ResidualAttentionFusion, TextOnly, VectorAddition,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::{finite_difference_check, Tensor};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "fusion-test");
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    struct Inputs {
        ip: Tensor<f64>,
        tp: Tensor<f64>,
        it: Tensor<f64>,
        tt: Tensor<f64>,
    }

    impl Inputs {
        fn new(d: usize, seed: u64) -> Self {
            Self {
                ip: random(&[d], seed),
                tp: random(&[d], seed + 1),
                it: random(&[5, d], seed + 2),
                tt: random(&[3, d], seed + 3),
            }
        }

        fn view(&self) -> FusionInput<'_, f64> {
            FusionInput {
                img_pooled: &self.ip,
                txt_pooled: &self.tp,
                img_tokens: &self.it,
                txt_tokens: &self.tt,
            }
        }
    }

    fn model(mode: &str, alpha: f64, d: usize, seed: u64) -> FusionModel<f64> {
        let cfg = FusionConfig {
            mode: mode.into(),
            alpha,
            ..Default::default()
        };
        FusionModel::new(&cfg, d, seed).unwrap()
    }

    fn cosine(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.dot(b).unwrap() / (a.norm() * b.norm())
    }

    #[test]
    fn raf_with_zero_alpha_is_vector_addition() {
        for seed in 0..20 {
            let x = Inputs::new(16, seed * 10);
            let raf = model("raf", 0.0, 16, seed).fuse(&x.view()).unwrap();
            let va = model("va", 0.0, 16, seed).fuse(&x.view()).unwrap();
            assert_eq!(raf, va);
        }
    }

    #[test]
    fn raf_starts_close_to_vector_addition() {
        for seed in 0..50 {
            let x = Inputs::new(64, seed * 10);
            let raf = model("raf", 0.01, 64, seed).fuse(&x.view()).unwrap();
            let va = model("va", 0.01, 64, seed).fuse(&x.view()).unwrap();
            assert!(cosine(&raf, &va) > 0.99);
        }
    }

    #[test]
    fn vector_addition_with_zero_text_is_normalized_image() {
        let mut x = Inputs::new(8, 1);
        x.tp = Tensor::zeros(&[8]);
        let v = model("va", 0.01, 8, 0).fuse(&x.view()).unwrap();
        assert_eq!(v, crate::numerics::l2_normalize(&x.ip).unwrap());
    }

    #[test]
    fn catalog_embeddings() {
        let x = Inputs::new(64, 3);
        let img = crate::numerics::l2_normalize(&x.ip).unwrap();
        assert_eq!(model("va", 0.01, 64, 0).embed_catalog_item(&x.ip, &x.it).unwrap(), img);
        assert_eq!(model("raf", 0.0, 64, 0).embed_catalog_item(&x.ip, &x.it).unwrap(), img);
        assert_eq!(model("txt_only", 0.0, 64, 0).embed_catalog_item(&x.ip, &x.it).unwrap(), img);
        let raf = model("raf", 0.01, 64, 0).embed_catalog_item(&x.ip, &x.it).unwrap();
        assert!(cosine(&raf, &img) > 0.99);
        let af = model("af", 0.01, 64, 0).embed_catalog_item(&x.ip, &x.it).unwrap();
        assert!((af.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_modes_need_tokens() {
        let x = Inputs::new(8, 5);
        let empty = Tensor::zeros(&[0, 8]);
        for mode in ["af", "raf"] {
            let m = model(mode, 0.01, 8, 0);
            let missing_text = FusionInput { txt_tokens: &empty, ..x.view() };
            assert!(matches!(m.fuse(&missing_text), Err(Error::Config(_))));
            let missing_image = FusionInput { img_tokens: &empty, ..x.view() };
            assert!(matches!(m.fuse(&missing_image), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_sum_is_degenerate() {
        let x = Inputs::new(8, 6);
        let neg = x.ip.scale(-1.0);
        let input = FusionInput { txt_pooled: &neg, ..x.view() };
        assert!(matches!(model("va", 0.0, 8, 0).fuse(&input), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ablation_modes() {
        let x = Inputs::new(8, 7);
        let img = crate::numerics::l2_normalize(&x.ip).unwrap();
        let txt = crate::numerics::l2_normalize(&x.tp).unwrap();
        assert_eq!(model("img_only", 0.0, 8, 0).fuse(&x.view()).unwrap(), img);
        assert_eq!(model("TXT-ONLY", 0.0, 8, 0).fuse(&x.view()).unwrap(), txt);
    }

    #[test]
    fn unknown_mode_is_config_error() {
        let cfg = FusionConfig { mode: "tirg".into(), ..Default::default() };
        assert!(matches!(FusionModel::<f32>::new(&cfg, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn scoring() {
        let a = crate::numerics::l2_normalize(&random(&[16], 1)).unwrap();
        let b = crate::numerics::l2_normalize(&random(&[16], 2)).unwrap();
        let s = score(&a, &[b.clone(), a.clone()]).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[0] - cosine(&a, &b)).abs() < 1e-12);
        let e0 = Tensor::vector(vec![1.0, 0.0]);
        let e1 = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(score(&e0, &[e1]).unwrap(), vec![0.0]);
        let long = Tensor::vector(vec![1.01, 0.0]);
        assert!(matches!(score(&long, &[e0]), Err(Error::Contract(_))));
    }

    /// Objective `<a, fuse(x)>`, differentiated with respect to one input slot.
    fn input_check(mode: &str, slot: usize, seed: u64) -> f64 {
        let m = model(mode, 0.5, 8, seed);
        let base = Inputs::new(8, seed * 7 + 1);
        let a = random(&[8], seed * 7 + 100);
        let x0 = [&base.ip, &base.tp, &base.it, &base.tt][slot].clone();
        finite_difference_check(
            |x| {
                let mut inp = Inputs { ip: base.ip.clone(), tp: base.tp.clone(), it: base.it.clone(), tt: base.tt.clone() };
                *[&mut inp.ip, &mut inp.tp, &mut inp.it, &mut inp.tt][slot] = x.clone();
                let trace = m.fuse_traced(&inp.view()).unwrap();
                let mut grads = m.zero_grads();
                let g = m.fuse_backward(&inp.view(), &trace, &a, &mut grads).unwrap();
                let gs = [g.img_pooled, g.txt_pooled, g.img_tokens, g.txt_tokens];
                (trace.output.dot(&a).unwrap(), gs[slot].clone())
            },
            &x0,
            1e-5,
        )
    }

    #[test]
    fn fuse_input_gradients() {
        for mode in ["va", "af", "raf", "img_only", "txt_only"] {
            for slot in 0..4 {
                let err = input_check(mode, slot, 3);
                assert!(err < 1e-4, "{mode} slot {slot}: {err}");
            }
        }
    }

    #[test]
    fn fuse_parameter_gradients() {
        for mode in ["af", "raf"] {
            let mut m = model(mode, 0.5, 8, 11);
            for p in m.params_mut() {
                let noise = random(p.shape(), p.value.len() as u64).scale(0.3);
                p.value.add_assign(&noise).unwrap();
            }
            let x = Inputs::new(8, 12);
            let a = random(&[8], 13);
            for idx in 0..BLOCK_TENSOR_NAMES.len() {
                let x0 = m.block.as_ref().unwrap().params.as_vec()[idx].value.clone();
                let err = finite_difference_check(
                    |w| {
                        let mut mm = m.clone();
                        mm.block.as_mut().unwrap().params.as_vec_mut()[idx].value = w.clone();
                        let trace = mm.fuse_traced(&x.view()).unwrap();
                        let mut grads = mm.zero_grads();
                        mm.fuse_backward(&x.view(), &trace, &a, &mut grads).unwrap();
                        (trace.output.dot(&a).unwrap(), grads.block.unwrap().as_vec()[idx].clone())
                    },
                    &x0,
                    1e-5,
                );
                assert!(err < 1e-4, "{mode} {}: {err}", BLOCK_TENSOR_NAMES[idx]);
            }
        }
    }

    #[test]
    fn catalog_gradients() {
        for mode in ["va", "af", "raf", "txt_only"] {
            let m = model(mode, 0.5, 8, 21);
            let x = Inputs::new(8, 22);
            let a = random(&[8], 23);
            for slot in 0..2 {
                let x0 = if slot == 0 { x.ip.clone() } else { x.it.clone() };
                let err = finite_difference_check(
                    |v| {
                        let (ip, it) = if slot == 0 { (v.clone(), x.it.clone()) } else { (x.ip.clone(), v.clone()) };
                        let trace = m.embed_catalog_traced(&ip, &it).unwrap();
                        let mut grads = m.zero_grads();
                        let (gp, gt) = m.catalog_backward(&ip, &it, &trace, &a, &mut grads).unwrap();
                        (trace.output.dot(&a).unwrap(), if slot == 0 { gp } else { gt })
                    },
                    &x0,
                    1e-5,
                );
                assert!(err < 1e-4, "{mode} slot {slot}: {err}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mode in ["va", "raf", "af"] {
            let path = dir.path().join(format!("{mode}.json"));
            let m = FusionModel::<f32>::new(&FusionConfig { mode: mode.into(), ..Default::default() }, 16, 4).unwrap();
            m.to_bundle().save(&path).unwrap();
            let back = FusionModel::<f32>::from_bundle(&crate::numerics::bundle::TensorBundle::load(&path).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn temperature_initialization_and_clamp() {
        let mut m = model("va", 0.0, 4, 0);
        assert!((m.tau() - 14.3).abs() < 1e-9);
        m.log_inv_temperature.value = Tensor::vector(vec![10.0]);
        assert_eq!(m.tau(), 100.0);
        assert!(m.tau_is_clamped());
        m.log_inv_temperature.value = Tensor::vector(vec![-1.0]);
        assert_eq!(m.tau(), 1.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn fused_outputs_are_unit_norm(seed in 0u64..10_000, mode in prop::sample::select(vec!["va", "af", "raf", "img_only", "txt_only"])) {
                let x = Inputs::new(8, seed);
                let m = model(mode, 0.3, 8, seed);
                let v = m.fuse(&x.view()).unwrap();
                prop_assert!((v.norm() - 1.0).abs() < 1e-5);
            }

            #[test]
            fn block_is_permutation_equivariant(seed in 0u64..10_000) {
                let m = model("af", 0.0, 8, seed);
                let block = m.block.as_ref().unwrap();
                let x = random(&[4, 8], seed);
                let rows: Vec<&[f64]> = [2usize, 0, 3, 1].iter().map(|&i| x.row(i)).collect();
                let xp = Tensor::from_rows(&rows, 8).unwrap();
                let y = block.forward(&x).unwrap();
                let yp = block.forward(&xp).unwrap();
                for (r, &i) in [2usize, 0, 3, 1].iter().enumerate() {
                    for (a, b) in yp.output().row(r).iter().zip(y.output().row(i)) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn rankings_ignore_common_rescaling(seed in 0u64..10_000, s in 0.01f64..100.0) {
                let m = model("va", 0.0, 8, 0);
                let x = Inputs::new(8, seed);
                let q = m.fuse(&x.view()).unwrap();
                let scaled = FusionInput {
                    img_pooled: &x.ip.scale(s),
                    txt_pooled: &x.tp.scale(s),
                    ..x.view()
                };
                let qs = m.fuse(&scaled).unwrap();
                let cat: Vec<Tensor<f64>> = (0..6).map(|i| random(&[8], seed + 50 + i)).collect();
                let e: Vec<_> = cat.iter().map(|c| m.embed_catalog_item(c, &x.it).unwrap()).collect();
                let es: Vec<_> = cat.iter().map(|c| m.embed_catalog_item(&c.scale(s), &x.it).unwrap()).collect();
                let order = |scores: Vec<f64>| {
                    let mut idx: Vec<usize> = (0..scores.len()).collect();
                    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                    idx
                };
                prop_assert_eq!(order(score(&q, &e).unwrap()), order(score(&qs, &es).unwrap()));
            }
        }
    }
}
