// Oracles are written as explicit index loops on purpose.
#![allow(clippy::needless_range_loop)]

use coseg::hbis::{
    generate_heatmap, hbis_forward, modulate_and_fuse, normalize_region, pool_context, select_region, HbisParams,
    TopKConfig,
};
use coseg::layers::Linear;
use coseg::rng::SplitMix64;
use coseg::tensor::{Graph, Tensor, Var};

type Mat = Vec<Vec<f64>>;

const P: usize = 20;
const N: usize = 3;
const CF: usize = 5;
const CC: usize = 4;

fn random_mat(rows: usize, cols: usize, rng: &mut SplitMix64, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.uniform(-scale, scale)).collect())
        .collect()
}

fn to_tensor(m: &Mat) -> Tensor<f64> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::new([m.len(), m[0].len()], flat).unwrap()
}

fn to_mat(t: &Tensor<f64>) -> Mat {
    let s = t.shape();
    let cols = if s.len() == 2 { s[1] } else { t.len() };
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random parameters with non-zero biases so every bias path is exercised.
fn random_params(seed: u64) -> HbisParams<Tensor<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut p = HbisParams::<Tensor<f64>>::init(CF, CC, &mut rng);
    p.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") || name.ends_with("alpha") {
            *t = Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(-0.5, 0.5));
        }
    });
    p
}

/// `x · W + b` by explicit loops.
fn linear(x: &Mat, l: &Linear<Tensor<f64>>) -> Mat {
    let (fin, fout) = (l.weight.shape()[0], l.weight.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|o| l.bias.data()[o] + (0..fin).map(|i| row[i] * l.weight.at(&[i, o])).sum::<f64>())
                .collect()
        })
        .collect()
}

fn stable_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

struct Reference {
    scores: Mat,
    probs: Mat,
    regions: Vec<Vec<usize>>,
    context: Mat,
    gate: Vec<f64>,
    embeddings: Mat,
    gamma: Mat,
    beta: Mat,
    features: Mat,
}

fn reference(f: &Mat, ce: &Mat, p: &HbisParams<Tensor<f64>>, cfg: &TopKConfig) -> Reference {
    let pixels = f.len();
    let queries = linear(ce, &p.query);
    let scores: Mat = f
        .iter()
        .map(|fp| {
            queries
                .iter()
                .map(|q| fp.iter().zip(q).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let probs: Mat = scores.iter().map(|r| r.iter().map(|&s| sigmoid(s)).collect()).collect();

    let k = ((cfg.ratio * pixels as f64).round() as usize).clamp(1, pixels);
    let projected = linear(f, &p.context);
    let mut regions = Vec::new();
    let mut context = Vec::new();
    for n in 0..ce.len() {
        let channel: Vec<f64> = probs.iter().map(|r| r[n]).collect();
        let region = stable_topk(&channel, k);
        let total: f64 = region.iter().map(|&i| channel[i]).sum();
        let mut c = vec![0.0; ce[0].len()];
        for &i in &region {
            let w = channel[i] / (total + cfg.eps);
            for (cj, pj) in c.iter_mut().zip(&projected[i]) {
                *cj += w * pj;
            }
        }
        regions.push(region);
        context.push(c);
    }

    let joined: Mat = ce
        .iter()
        .zip(&context)
        .map(|(a, b)| [a.clone(), b.clone()].concat())
        .collect();
    let gate: Vec<f64> = linear(&joined, &p.gate).iter().map(|r| sigmoid(r[0])).collect();
    let embeddings: Mat = (0..ce.len())
        .map(|n| {
            (0..ce[n].len())
                .map(|j| (1.0 - gate[n]) * ce[n][j] + gate[n] * context[n][j])
                .collect()
        })
        .collect();
    let gamma: Mat = linear(&embeddings, &p.scale)
        .iter()
        .map(|r| r.iter().map(|v| 1.0 + v.tanh()).collect())
        .collect();
    let beta = linear(&embeddings, &p.shift);

    let a = sigmoid(p.alpha.data()[0]);
    let features: Mat = (0..pixels)
        .map(|px| {
            let m = scores[px].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores[px].iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..f[px].len())
                .map(|c| {
                    let modulated: f64 = (0..ce.len())
                        .map(|n| e[n] / z * (gamma[n][c] * f[px][c] + beta[n][c]))
                        .sum();
                    a * f[px][c] + (1.0 - a) * modulated
                })
                .collect()
        })
        .collect();
    Reference {
        scores,
        probs,
        regions,
        context,
        gate,
        embeddings,
        gamma,
        beta,
        features,
    }
}

fn assert_close(got: &Mat, want: &Mat, tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what} rows");
    for (r, (a, b)) in got.iter().zip(want).enumerate() {
        assert_eq!(a.len(), b.len(), "{what} cols");
        for (c, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "{what}[{r}][{c}]: {x} vs {y}");
        }
    }
}

struct Case {
    f: Mat,
    ce: Mat,
    params: HbisParams<Tensor<f64>>,
    cfg: TopKConfig,
}

fn case(seed: u64) -> Case {
    let mut rng = SplitMix64::new(seed.wrapping_mul(31).wrapping_add(7));
    Case {
        f: random_mat(P, CF, &mut rng, 1.0),
        ce: random_mat(N, CC, &mut rng, 1.0),
        params: random_params(seed),
        cfg: TopKConfig { ratio: 0.2, eps: 1e-6 },
    }
}

fn run(c: &Case) -> (Graph<f64>, coseg::hbis::HbisOutput, Var) {
    let mut g = Graph::new();
    let f = g.constant(to_tensor(&c.f));
    let ce = g.constant(to_tensor(&c.ce));
    let p = c.params.map(&mut |t| g.constant(t.clone()));
    let out = hbis_forward(&mut g, f, ce, &p, &c.cfg).unwrap();
    (g, out, f)
}

#[test]
fn layer_matches_loop_reference() {
    for seed in 0..5 {
        let c = case(seed);
        let want = reference(&c.f, &c.ce, &c.params, &c.cfg);
        let (g, out, _) = run(&c);
        let m = |v: Var| to_mat(g.value(v));
        assert_close(&m(out.heatmap.scores), &want.scores, 1e-12, "scores");
        assert_close(&m(out.heatmap.probs), &want.probs, 1e-12, "probs");
        assert_eq!(out.regions, want.regions);
        assert_close(&m(out.context), &want.context, 1e-12, "context");
        assert_close(
            &m(out.gate),
            &want.gate.iter().map(|&v| vec![v]).collect(),
            1e-12,
            "gate",
        );
        assert_close(&m(out.embeddings), &want.embeddings, 1e-12, "embeddings");
        assert_close(&m(out.gamma), &want.gamma, 1e-12, "gamma");
        assert_close(&m(out.beta), &want.beta, 1e-12, "beta");
        assert_close(&m(out.features), &want.features, 1e-12, "features");
    }
}

#[test]
fn heatmap_matches_triple_loop() {
    let c = case(11);
    let mut g = Graph::new();
    let f = g.constant(to_tensor(&c.f));
    let ce = g.constant(to_tensor(&c.ce));
    let q = c.params.query.map(&mut |t| g.constant(t.clone()));
    let h = generate_heatmap(&mut g, f, ce, &q).unwrap();
    assert_eq!(g.shape(h.scores), &[P, N]);
    let wq = &c.params.query;
    for p in 0..P {
        for n in 0..N {
            let mut s = 0.0;
            for j in 0..CF {
                let mut q = wq.bias.data()[j];
                for i in 0..CC {
                    q += c.ce[n][i] * wq.weight.at(&[i, j]);
                }
                s += c.f[p][j] * q;
            }
            assert!((g.value(h.scores).at(&[p, n]) - s).abs() <= 1e-12);
            assert!((g.value(h.probs).at(&[p, n]) - sigmoid(s)).abs() <= 1e-12);
        }
    }
}

#[test]
fn pooled_context_matches_weighted_sum() {
    let c = case(12);
    let mut rng = SplitMix64::new(99);
    let channel: Vec<f64> = (0..P).map(|_| rng.next_f64()).collect();
    let mut g = Graph::new();
    let f = g.constant(to_tensor(&c.f));
    let ch = g.constant(Tensor::new([P], channel.clone()).unwrap());
    let region = select_region(&channel, &c.cfg).unwrap();
    assert_eq!(region, stable_topk(&channel, 4));
    let w = normalize_region(&mut g, ch, &region, c.cfg.eps).unwrap();
    let ctx = c.params.context.map(&mut |t| g.constant(t.clone()));
    let pooled = pool_context(&mut g, f, w, &region, &ctx).unwrap();
    let total: f64 = region.iter().map(|&i| channel[i]).sum();
    let projected = linear(&c.f, &c.params.context);
    for j in 0..CC {
        let want: f64 = region
            .iter()
            .map(|&i| channel[i] / (total + c.cfg.eps) * projected[i][j])
            .sum();
        assert!((g.value(pooled).at(&[0, j]) - want).abs() <= 1e-12);
    }
}

#[test]
fn region_weights_sum_to_mass_ratio() {
    let mut rng = SplitMix64::new(3);
    for trial in 0..20 {
        let len = 5 + trial * 3;
        let channel: Vec<f64> = (0..len).map(|_| rng.next_f64()).collect();
        let cfg = TopKConfig {
            ratio: 0.05 + 0.04 * trial as f64,
            eps: 1e-6,
        };
        let region = select_region(&channel, &cfg).unwrap();
        let mut g = Graph::new();
        let ch = g.constant(Tensor::new([len], channel.clone()).unwrap());
        let w = normalize_region(&mut g, ch, &region, cfg.eps).unwrap();
        let s: f64 = region.iter().map(|&i| channel[i]).sum();
        let got: f64 = g.value(w).data().iter().sum();
        assert!((got - s / (s + cfg.eps)).abs() <= 1e-12);
        assert!(g.value(w).data().iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn fusion_matches_per_category_sum() {
    let c = case(13);
    let mut rng = SplitMix64::new(5);
    let gamma = random_mat(N, CF, &mut rng, 1.0);
    let beta = random_mat(N, CF, &mut rng, 1.0);
    let scores = random_mat(P, N, &mut rng, 3.0);
    let alpha = 0.4;
    let mut g = Graph::new();
    let f = g.constant(to_tensor(&c.f));
    let gv = g.constant(to_tensor(&gamma));
    let bv = g.constant(to_tensor(&beta));
    let sv = g.constant(to_tensor(&scores));
    let av = g.constant(Tensor::scalar(alpha));
    let out = modulate_and_fuse(&mut g, f, gv, bv, sv, av).unwrap();
    let a = sigmoid(alpha);
    for p in 0..P {
        let z: f64 = scores[p].iter().map(|s| s.exp()).sum();
        for j in 0..CF {
            let mut m = 0.0;
            for n in 0..N {
                m += scores[p][n].exp() / z * (gamma[n][j] * c.f[p][j] + beta[n][j]);
            }
            let want = a * c.f[p][j] + (1.0 - a) * m;
            assert!((g.value(out).at(&[p, j]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn fusion_softmax_sums_to_one() {
    let mut rng = SplitMix64::new(8);
    let scores = random_mat(P, N, &mut rng, 40.0);
    let mut g = Graph::new();
    let s = g.constant(to_tensor(&scores));
    let w = g.softmax(s, 1).unwrap();
    for row in to_mat(g.value(w)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn saturated_blend_returns_previous_features() {
    let mut c = case(14);
    c.params.alpha = Tensor::scalar(40.0);
    let (g, out, f) = run(&c);
    let (a, b) = (g.value(out.features).data(), g.value(f).data());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn scale_stays_inside_open_interval() {
    for seed in 0..10 {
        let mut c = case(100 + seed);
        // steep weights push tanh toward its limits
        c.params.scale.weight = c.params.scale.weight.map(|w| w * 4.0);
        let (g, out, _) = run(&c);
        assert!(g.value(out.gamma).data().iter().all(|&v| v > 0.0 && v < 2.0));
    }
}

#[test]
fn gate_is_convex_blend() {
    for seed in 0..10 {
        let c = case(200 + seed);
        let (g, out, _) = run(&c);
        let gate = g.value(out.gate).data();
        assert!(gate.iter().all(|&v| v > 0.0 && v < 1.0));
        let (prev, ctx, new) = (&c.ce, to_mat(g.value(out.context)), to_mat(g.value(out.embeddings)));
        for n in 0..N {
            for j in 0..CC {
                let (lo, hi) = (prev[n][j].min(ctx[n][j]), prev[n][j].max(ctx[n][j]));
                assert!(new[n][j] >= lo - 1e-15 && new[n][j] <= hi + 1e-15);
            }
        }
    }
}

#[test]
fn pixel_permutation_is_equivariant() {
    let c = case(21);
    let mut rng = SplitMix64::new(21);
    let mut perm: Vec<usize> = (0..P).collect();
    rng.shuffle(&mut perm);
    let shuffled = Case {
        f: perm.iter().map(|&i| c.f[i].clone()).collect(),
        ce: c.ce.clone(),
        params: c.params.clone(),
        cfg: c.cfg,
    };
    let (g0, o0, _) = run(&c);
    let (g1, o1, _) = run(&shuffled);
    let base = to_mat(g0.value(o0.features));
    let moved = to_mat(g1.value(o1.features));
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..CF {
            assert!((moved[k][j] - base[i][j]).abs() <= 1e-12);
        }
    }
    assert_close(
        &to_mat(g1.value(o1.embeddings)),
        &to_mat(g0.value(o0.embeddings)),
        1e-12,
        "embeddings",
    );
}

#[test]
fn category_permutation_is_equivariant() {
    let c = case(22);
    let perm = [2, 0, 1];
    let shuffled = Case {
        f: c.f.clone(),
        ce: perm.iter().map(|&n| c.ce[n].clone()).collect(),
        params: c.params.clone(),
        cfg: c.cfg,
    };
    let (g0, o0, _) = run(&c);
    let (g1, o1, _) = run(&shuffled);
    let e0 = to_mat(g0.value(o0.embeddings));
    let e1 = to_mat(g1.value(o1.embeddings));
    for (k, &n) in perm.iter().enumerate() {
        for j in 0..CC {
            assert!((e1[k][j] - e0[n][j]).abs() <= 1e-12);
        }
        assert_eq!(o1.regions[k], o0.regions[n]);
    }
    assert_close(
        &to_mat(g1.value(o1.features)),
        &to_mat(g0.value(o0.features)),
        1e-12,
        "features",
    );
}

#[test]
fn shape_errors() {
    let c = case(30);
    let mut g = Graph::new();
    let f = g.constant(Tensor::<f64>::zeros([P, CF + 1]));
    let ce = g.constant(to_tensor(&c.ce));
    let p = c.params.map(&mut |t| g.constant(t.clone()));
    assert!(hbis_forward(&mut g, f, ce, &p, &c.cfg).is_err());
    let f = g.constant(to_tensor(&c.f));
    let single = g.constant(Tensor::<f64>::zeros([1, CC]));
    assert!(hbis_forward(&mut g, f, single, &p, &c.cfg).is_err());
    let bad = TopKConfig { ratio: 0.0, eps: 1e-6 };
    assert!(bad.validate().is_err());
    assert!(TopKConfig { ratio: 0.5, eps: 0.0 }.validate().is_err());
}

#[test]
fn identity_modulation_keeps_features_for_any_blend() {
    for alpha in [-3.0, 0.0, 2.2] {
        let mut c = case(40);
        c.params.scale = Linear::zeros(CC, CF);
        c.params.shift = Linear::zeros(CC, CF);
        c.params.alpha = Tensor::scalar(alpha);
        let (g, out, f) = run(&c);
        assert!(g.value(out.gamma).data().iter().all(|&v| v == 1.0));
        for (x, y) in g.value(out.features).data().iter().zip(g.value(f).data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
