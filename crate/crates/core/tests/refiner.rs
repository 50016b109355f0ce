mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::dense::{self, Rows};
use common::{random_cloud, rel_err, rng, signature, test_camera};
use splatrefine::autodiff::{Tape, Tensor};
use splatrefine::encoder::{EncoderConfig, EncoderVariant};
use splatrefine::gaussians::GaussianCloud;
use splatrefine::image_io::Image;
use splatrefine::metrics::{psnr, ssim};
use splatrefine::nn::ParamSet;
use splatrefine::pipeline::PrunedScene;
use splatrefine::pruner::PruneConfig;
use splatrefine::rasterizer::{rasterize, Camera, SplatParams};
use splatrefine::refiner::{
    apply_residual, attention_block, forward_on_tape, image_loss, knn_graph, lr_at, refine, render_on_tape, train,
    Deltas, Level, Model, Prepared, RefinerConfig, ResidualScales, TrainConfig,
};
use splatrefine::synthscene::SceneSpec;
use splatrefine::Real;

fn points(r: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()
}

#[test]
fn knn_matches_exhaustive_search() {
    let pts = points(&mut rng(1), 200);
    for k in [1, 5, 16] {
        let g = knn_graph(&pts, k);
        for i in 0..200 {
            let mut all: Vec<(f64, usize)> = (0..200)
                .filter(|&j| j != i)
                .map(|j| ((0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>(), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = std::iter::once(i).chain(all.iter().take(k - 1).map(|p| p.1)).collect();
            assert_eq!(g.row(i), want.as_slice());
        }
    }
}

fn block_params(c: usize, seed: u64) -> ParamSet<f64> {
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    for m in ["q", "k", "v", "o"] {
        p.add_linear(&format!("t.{m}"), c, c, &mut r);
    }
    p.add_layer_norm("t.ln1", c);
    p.add_linear("t.ffn1", c, 2 * c, &mut r);
    p.add_linear("t.ffn2", 2 * c, c, &mut r);
    p.add_layer_norm("t.ln2", c);
    // Non-trivial norm affine parameters.
    for n in ["t.ln1.g", "t.ln1.b", "t.ln2.g", "t.ln2.b"] {
        let t = p.get_mut(n).unwrap();
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

fn run_block(p: &ParamSet<f64>, x: &Tensor<f64>, level: &Level, heads: usize) -> Tensor<f64> {
    let tape = Tape::new();
    let b = p.bind(&tape);
    let out = attention_block(&tape, &b, "t", tape.constant(x.clone()), level, heads).unwrap();
    (*out.value()).clone()
}

fn rows(t: &Tensor<f64>) -> Rows {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn oracle_block(p: &ParamSet<f64>, x: &Rows, nbrs: &[Vec<usize>], heads: usize) -> Rows {
    let c = x[0].len();
    let dh = c / heads;
    let (q, k, v) = (dense::linear(p, "t.q", x), dense::linear(p, "t.k", x), dense::linear(p, "t.v", x));
    let mut attn = vec![vec![0.0; c]; x.len()];
    for (i, nb) in nbrs.iter().enumerate() {
        for h in 0..heads {
            let ch = h * dh..(h + 1) * dh;
            let s: Vec<f64> = nb
                .iter()
                .map(|&j| ch.clone().map(|a| q[i][a] * k[j][a]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = dense::softmax_row(&s);
            for (wj, &j) in w.iter().zip(nb) {
                for a in ch.clone() {
                    attn[i][a] += wj * v[j][a];
                }
            }
        }
    }
    let y = dense::layer_norm(p, "t.ln1", &dense::add(x, &dense::linear(p, "t.o", &attn)));
    let f = dense::linear(p, "t.ffn2", &dense::relu(&dense::linear(p, "t.ffn1", &y)));
    dense::layer_norm(p, "t.ln2", &dense::add(&y, &f))
}

#[test]
fn attention_matches_per_neighbourhood_oracle() {
    let mut r = rng(2);
    for (k, heads) in [(3, 2), (6, 4), (4, 1)] {
        let pts = points(&mut r, 6);
        let level = Level::new(pts, k, None);
        let c = 8;
        let p = block_params(c, 3 + k as u64);
        let x = Tensor::from_fn(&[6, c], |_| r.random_range(-1.0..1.0));
        let got = run_block(&p, &x, &level, heads);
        let nbrs: Vec<Vec<usize>> = (0..6).map(|i| level.graph.row(i).to_vec()).collect();
        let want = oracle_block(&p, &rows(&x), &nbrs, heads);
        assert!(dense::max_abs_diff(&want, got.data()) < 1e-12);
    }
}

/// With only itself to attend to and identity value/output maps, the
/// attention sub-layer passes its input through; with the feed-forward
/// zeroed the block reduces to a layer norm of the input.
#[test]
fn self_only_attention_is_a_pass_through() {
    let c = 6;
    let mut p = block_params(c, 4);
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    for m in ["t.v", "t.o"] {
        p.insert(format!("{m}.w"), eye.clone());
        p.insert(format!("{m}.b"), Tensor::zeros(&[c]));
    }
    for m in ["t.ffn1", "t.ffn2"] {
        let (w, b) = (p.get(&format!("{m}.w")).unwrap().shape().to_vec(), p.get(&format!("{m}.b")).unwrap().shape().to_vec());
        p.insert(format!("{m}.w"), Tensor::zeros(&w));
        p.insert(format!("{m}.b"), Tensor::zeros(&b));
    }
    for n in ["t.ln1", "t.ln2"] {
        p.add_layer_norm(n, c);
    }
    let mut r = rng(5);
    let level = Level::new(points(&mut r, 9), 1, None);
    let x = Tensor::from_fn(&[9, c], |_| r.random_range(-2.0..2.0));
    let got = run_block(&p, &x, &level, 2);
    // LN(LN(2x)) = LN(x) up to the variance epsilon.
    let want = dense::layer_norm(&p, "t.ln1", &rows(&x));
    assert!(dense::max_abs_diff(&want, got.data()) < 1e-4);
}

fn small_model(variant: EncoderVariant, zero_init: bool, seed: u64) -> Model {
    let enc = EncoderConfig {
        feature_width: 8,
        sh_reduced_dim: 4,
        hidden: 8,
        variant,
        ..EncoderConfig::default()
    };
    let refiner = RefinerConfig {
        knn_k: 4,
        heads: 2,
        head_hidden: 8,
        zero_init_deltas: zero_init,
        ..RefinerConfig::desk()
    };
    Model::init(enc, refiner, seed).unwrap()
}

#[test]
fn zero_head_weights_give_zero_feature_updates() {
    let mut m = small_model(EncoderVariant::Full, false, 6);
    for n in ["ref.head_p.w", "ref.head_p.b", "ref.head_a.w", "ref.head_a.b"] {
        let t = m.params.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let cloud = random_cloud(&mut rng(7), 30, 3);
    let prep = Prepared::<f32>::new(&cloud, &m.refiner);
    let tape = Tape::new();
    let b = m.params.bind(&tape);
    let f = forward_on_tape(&tape, &b, &m.encoder, &m.refiner, &prep).unwrap();
    assert!(f.fp.value().data().iter().all(|&v| v == 0.0));
    assert!(f.fa.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_examples() {
    let cloud = random_cloud(&mut rng(8), 12, 3);
    let s = ResidualScales::default();
    assert_eq!(apply_residual(&cloud, &Deltas::zeros(12), &s).unwrap(), cloud);
    let mut d = Deltas::zeros(12);
    d.geometry.data_mut()[5 * 10] = 1.0;
    let out = apply_residual(&cloud, &d, &s).unwrap();
    for (i, (a, b)) in out.iter().zip(cloud.iter()).enumerate() {
        if i == 5 {
            assert_eq!(a.position[0], b.position[0] + 0.01f32);
            assert_eq!(a.position[1..], b.position[1..]);
            let mut rest = a.clone();
            rest.position = b.position;
            assert_eq!(&rest, b);
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(apply_residual(&cloud, &Deltas::zeros(11), &s).is_err());
}

#[test]
fn random_residuals_keep_activated_constraints() {
    let cloud = random_cloud(&mut rng(9), 10, 3);
    let s = ResidualScales::default();
    let mut r = rng(10);
    for _ in 0..1000 {
        let big: f32 = r.random_range(0.1..50.0);
        let d = Deltas {
            geometry: Tensor::from_fn(&[10, 10], |_| r.random_range(-big..big)),
            appearance: Tensor::from_fn(&[10, 49], |_| r.random_range(-big..big)),
        };
        let out = apply_residual(&cloud, &d, &s).unwrap();
        assert_eq!(out.len(), cloud.len());
        for g in out.iter() {
            let a = g.opacity();
            assert!(a > 0.0 && a < 1.0);
            assert!(g.scale().iter().all(|&v| v > 0.0));
            let n = g.unit_rotation().unwrap().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            let raw = g.rotation.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            assert!((raw - 1.0).abs() < 1e-6);
        }
    }
}

fn smooth(seed: u64, w: usize, h: usize) -> Image {
    let mut r = rng(seed);
    let f: Vec<f32> = (0..3).map(|_| r.random_range(0.1..0.4)).collect();
    let data = (0..w * h * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            0.4 + 0.3 * ((p % w) as f32 * f[c]).sin() * ((p / w) as f32 * 0.2).cos()
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

#[test]
fn loss_examples() {
    let a = smooth(1, 20, 16);
    let z = image_loss(&a, &a, 0.1).unwrap();
    assert_eq!((z.l1, z.perc, z.total), (0.0, 0.0, 0.0));
    let base = Image::new(20, 16, a.data.iter().map(|v| v * 0.8).collect()).unwrap();
    let up = Image::new(20, 16, base.data.iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((image_loss(&base, &up, 0.1).unwrap().l1 - 0.1).abs() < 1e-6);
    let b = smooth(2, 20, 16);
    let got = image_loss(&a, &b, 0.1).unwrap();
    let l1 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64;
    let s = ssim(&a, &b).unwrap();
    assert!((got.l1 - l1).abs() < 1e-9);
    assert!((got.perc - (1.0 - s)).abs() < 1e-9);
    assert!((got.total - (l1 + 0.1 * (1.0 - s))).abs() < 1e-9);
}

#[test]
fn lr_schedule() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(&c, 0), 1e-5);
    assert!((lr_at(&c, 6000) - 1e-6).abs() < 1e-20);
    assert!((lr_at(&c, 9999) - 1e-6).abs() < 1e-20);
}

fn toy_scene(seed: u64, n: usize, size: usize) -> PrunedScene {
    let spec = SceneSpec {
        seed,
        n_gaussians: 2 * n,
        n_cameras: 8,
        width: size,
        height: size,
        ..SceneSpec::default()
    };
    PrunedScene::new(&spec, &PruneConfig::with_fraction(0.3, 0.5)).unwrap()
}

#[test]
fn zero_iterations_leave_the_initialisation() {
    let scene = toy_scene(1, 20, 16);
    let mut m = Model::desk(4).unwrap();
    let init = m.params.clone();
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::desk()
    };
    assert!(train(&[scene.train_scene()], &mut m, &cfg, |_| {}).unwrap().is_empty());
    assert_eq!(m.params, init);
}

#[test]
fn identity_start_renders_bit_identically() {
    let scene = toy_scene(2, 40, 24);
    let m = Model::desk(5).unwrap();
    let refined = refine(&scene.pruned, &m).unwrap();
    assert_eq!(refined, scene.pruned);
    for cam in &scene.cameras {
        let (a, b) = (rasterize(&scene.pruned, cam).unwrap(), rasterize(&refined, cam).unwrap());
        assert_eq!(a.rgb, b.rgb);
        // The training-time render path starts at the same image.
        let prep = Prepared::<f32>::new(&scene.pruned, &m.refiner);
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let f = forward_on_tape(&tape, &bound, &m.encoder, &m.refiner, &prep).unwrap();
        let img = render_on_tape(&tape, &f.params, 3, cam).unwrap();
        assert_eq!(img.value().data(), a.rgb.as_slice());
    }
}

fn train_loss(scene: &PrunedScene, cloud: &GaussianCloud) -> f64 {
    let views = &scene.split.train;
    views
        .iter()
        .map(|&v| {
            let r = Image::from_render(&rasterize(cloud, &scene.cameras[v]).unwrap());
            image_loss(&r, &scene.targets[v], 0.1).unwrap().total
        })
        .sum::<f64>()
        / views.len() as f64
}

#[test]
fn toy_training_lowers_the_loss() {
    let scene = toy_scene(3, 50, 32);
    assert_eq!(scene.pruned.len(), 50);
    let mut m = Model::desk(6).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        ..TrainConfig::desk()
    };
    let before = train_loss(&scene, &scene.pruned);
    let log = train(&[scene.train_scene()], &mut m, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.iter().all(|r| r.total.is_finite()));
    let after = train_loss(&scene, &refine(&scene.pruned, &m).unwrap());
    assert!(after < before, "{after} vs {before}");
}

/// Σ w ⊙ render for one camera through the whole model.
fn pipeline_value<T: Real>(m: &Model, params: &ParamSet<T>, prep: &Prepared<T>, cam: &Camera, w: &[f64]) -> (f64, Vec<u64>) {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let f = forward_on_tape(&tape, &b, &m.encoder, &m.refiner, prep).unwrap();
    let img = render_on_tape(&tape, &f.params, 3, cam).unwrap();
    let v = img.value().data().iter().zip(w).map(|(a, b)| a.as_f64() * b).sum();
    let sp = SplatParams {
        positions: f.params.positions.value().data().to_vec(),
        rotations: f.params.rotations.value().data().to_vec(),
        log_scales: f.params.log_scales.value().data().to_vec(),
        opacity_logits: f.params.opacity.value().data().to_vec(),
        sh: f.params.sh.value().data().to_vec(),
        sh_degree: 3,
    };
    (v, signature(&sp, cam))
}

fn pipeline_gradients<T: Real>(m: &Model, params: &ParamSet<T>, prep: &Prepared<T>, cam: &Camera, w: &[f64]) -> Vec<Tensor<T>> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let f = forward_on_tape(&tape, &b, &m.encoder, &m.refiner, prep).unwrap();
    let img = render_on_tape(&tape, &f.params, 3, cam).unwrap();
    let wt = Tensor::new(img.shape(), w.iter().map(|&v| T::lit(v)).collect()).unwrap();
    let l = img.mul(tape.constant(wt)).unwrap().sum();
    b.grads(&tape.backward(l).unwrap())
}

/// Worst relative error of `T` analytic gradients against a five-point
/// finite difference of the float64 shadow, over sampled parameter entries.
/// Entries whose perturbation changes the discrete compositing state are
/// skipped.
fn pipeline_fd<T: Real>(floor_frac: f64) -> (f64, usize) {
    let m = small_model(EncoderVariant::Full, false, 11);
    let cloud = random_cloud(&mut rng(12), 10, 3);
    let cam = test_camera(&mut rng(13), 16, 16);
    let mut r = rng(14);
    let w: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let grads = pipeline_gradients(&m, &m.params.cast::<T>(), &Prepared::<T>::new(&cloud, &m.refiner), &cam, &w);
    let gmax = grads.iter().flat_map(|g| g.data()).fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
    let shadow: ParamSet<f64> = m.params.cast();
    let prep = Prepared::<f64>::new(&cloud, &m.refiner);
    let (_, sig0) = pipeline_value(&m, &shadow, &prep, &cam, &w);
    let eps = 1e-4;
    let (mut worst, mut checked) = (0.0f64, 0);
    for (k, g) in grads.iter().enumerate() {
        for i in (0..g.len()).step_by(1 + g.len() / 3) {
            let shifted = |d: f64| {
                let mut p = shadow.clone();
                p.tensors_mut()[k].data_mut()[i] += d;
                pipeline_value(&m, &p, &prep, &cam, &w)
            };
            // Truncation is O(eps^4), so eps can be large enough to keep
            // roundoff small on tiny gradients.
            let pts: Vec<(f64, Vec<u64>)> = [2.0, 1.0, -1.0, -2.0].iter().map(|&s| shifted(s * eps)).collect();
            if pts.iter().any(|(_, s)| *s != sig0) {
                continue;
            }
            let fd = (-pts[0].0 + 8.0 * pts[1].0 - 8.0 * pts[2].0 + pts[3].0) / (12.0 * eps);
            worst = worst.max(rel_err(g.data()[i].as_f64(), fd, floor_frac * gmax));
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn whole_pipeline_gradient_f64() {
    let (worst, checked) = pipeline_fd::<f64>(1e-6);
    assert!(checked > 100, "{checked}");
    assert!(worst < 1e-4, "worst {worst:.3e} over {checked}");
}

#[test]
fn whole_pipeline_gradient_f32() {
    let (worst, checked) = pipeline_fd::<f32>(1e-3);
    assert!(checked > 100, "{checked}");
    assert!(worst < 1e-2, "worst {worst:.3e} over {checked}");
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let m = small_model(EncoderVariant::Full, false, 15);
    let cloud = random_cloud(&mut rng(16), 25, 3);
    let cam = test_camera(&mut rng(17), 24, 24);
    let prep = Prepared::<f32>::new(&cloud, &m.refiner);
    let w = vec![1.0; 24 * 24 * 3];
    let grads = pipeline_gradients(&m, &m.params, &prep, &cam, &w);
    for (name, g) in m.params.names().iter().zip(&grads) {
        assert!(g.is_finite(), "{name}");
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} receives no gradient");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attention_block_is_permutation_equivariant(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let pts = points(&mut r, 14);
        let c = 8;
        let p = block_params(c, seed);
        let x = Tensor::from_fn(&[14, c], |_| r.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..14).collect();
        perm.shuffle(&mut r);
        let a = run_block(&p, &x, &Level::new(pts.clone(), 5, None), 2);
        let xp = Tensor::from_fn(&[14, c], |i| x.data()[perm[i / c] * c + i % c]);
        let pp: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let b = run_block(&p, &xp, &Level::new(pp, 5, None), 2);
        for (j, &i) in perm.iter().enumerate() {
            for ch in 0..c {
                prop_assert!((b.data()[j * c + ch] - a.data()[i * c + ch]).abs() < 1e-12);
            }
        }
    }

    /// Refining a permuted cloud renders the same image.
    #[test]
    fn refinement_is_permutation_equivariant(seed in 0u64..10_000) {
        let m = small_model(EncoderVariant::Full, false, seed);
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, 30, 3);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut r);
        let cam = test_camera(&mut r, 24, 24);
        let a = Image::from_render(&rasterize(&refine(&cloud, &m).unwrap(), &cam).unwrap());
        let b = Image::from_render(&rasterize(&refine(&cloud.subset(&perm).unwrap(), &m).unwrap(), &cam).unwrap());
        let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst < 1e-4, "max pixel difference {}", worst);
        prop_assert!(psnr(&a, &b).unwrap() > 80.0);
    }
}
