//! Finite-difference verification of every backward rule, in double
//! precision.
//!
//! Each check builds a scalar from its inputs, differentiates it with the
//! tape and compares every input element against the central difference
//! `(f(x + ε) − f(x − ε)) / 2ε`. Scalars are random linear functionals of
//! the op output so that the whole Jacobian is exercised, not just its
//! column sums.
//!
//! ReLU and Top-K selection make the end-to-end loss piecewise smooth. When
//! `x ± ε` lands on a different piece than `x` (see
//! [`Graph::branch_signature`]) the step is shrunk tenfold, up to twice; an
//! element that still straddles a boundary is reported as skipped instead
//! of compared.

use crate::error::Result;
use crate::hbis::{hbis_forward, HbisParams, TopKConfig};
use crate::losses::{cross_entropy, dice_loss, fisher_loss, heatmap_loss, total_loss, LossInputs, LossWeights};
use crate::model::{self, ModelConfig, ModelParams};
use crate::rng::SplitMix64;
use crate::tensor::{AdjointFault, Graph, Tensor, Var};

/// Relative-error floor: `|a − n| / max(|a|, |n|, FLOOR)`. Entries smaller
/// than this are compared absolutely at `FLOOR · TOLERANCE`, about ten
/// times the rounding noise of a central difference of an O(1) loss at
/// `ε = 1e-5`.
pub const FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub component: String,
    pub max_rel_err: f64,
    pub elements: usize,
    /// Elements sitting on a ReLU or Top-K boundary at every tried step.
    pub skipped: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<CheckLine>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn render(&self) -> String {
        let width = self.lines.iter().map(|l| l.component.len()).max().unwrap_or(0);
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&format!(
                "{:<width$}  {:>6} elems  max_rel_err {:.3e}  {}",
                l.component,
                l.elements,
                l.max_rel_err,
                if l.passed() { "PASS" } else { "FAIL" }
            ));
            if l.skipped > 0 {
                s.push_str(&format!("  ({} at a kink, skipped)", l.skipped));
            }
            s.push('\n');
        }
        s
    }
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputError {
    pub max_rel_err: f64,
    pub skipped: usize,
}

/// Analytic gradients and central differences of `build` at `inputs`, one
/// max relative error per input group.
pub struct Checker {
    pub eps: f64,
    pub fault: Option<AdjointFault>,
}

impl Checker {
    pub fn new(eps: f64, fault: Option<AdjointFault>) -> Self {
        Self { eps, fault }
    }

    fn graph(&self) -> Graph<f64> {
        match self.fault {
            Some(f) => Graph::with_fault(f),
            None => Graph::new(),
        }
    }

    /// Per-input maximum relative error and number of skipped elements.
    pub fn errors(&self, inputs: &[Tensor<f64>], build: &Builder<'_>) -> Result<Vec<InputError>> {
        let mut g = self.graph();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let signature = g.branch_signature();
        g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();

        let eval = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            Ok((g.value(out).data()[0], g.branch_signature()))
        };
        let mut work = inputs.to_vec();
        let mut errs = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let mut result = InputError::default();
            for j in 0..inputs[i].len() {
                let x0 = inputs[i].data()[j];
                let mut numeric = None;
                for shrink in [1.0, 0.1, 0.01] {
                    let step = self.eps * shrink;
                    work[i].data_mut()[j] = x0 + step;
                    let (up, sig_up) = eval(&work)?;
                    work[i].data_mut()[j] = x0 - step;
                    let (down, sig_down) = eval(&work)?;
                    work[i].data_mut()[j] = x0;
                    if sig_up == signature && sig_down == signature {
                        numeric = Some((up - down) / (2.0 * step));
                        break;
                    }
                }
                match numeric {
                    Some(n) => {
                        result.max_rel_err = result.max_rel_err.max(relative_error(analytic[i].data()[j], n));
                    }
                    None => result.skipped += 1,
                }
            }
            errs.push(result);
        }
        Ok(errs)
    }

    fn line(&self, component: &str, inputs: &[Tensor<f64>], build: &Builder<'_>) -> Result<CheckLine> {
        let errs = self.errors(inputs, build)?;
        Ok(CheckLine {
            component: component.into(),
            max_rel_err: errs.iter().map(|e| e.max_rel_err).fold(0.0, f64::max),
            elements: inputs.iter().map(Tensor::len).sum(),
            skipped: errs.iter().map(|e| e.skipped).sum(),
        })
    }
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
}

/// Values bounded away from zero, so ReLU's kink is out of reach of ±ε.
fn away_from_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.uniform(0.1, 1.0);
        if rng.next_u64() & 1 == 0 {
            v
        } else {
            -v
        }
    })
}

/// `Σ w ⊙ y` for a fixed random `w` drawn from `seed`.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = g.constant(random(g.shape(y), &mut rng));
    let prod = g.mul(y, w)?;
    Ok(g.sum_all(prod))
}

/// Every primitive op, one line each.
pub fn op_suite(checker: &Checker, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = SplitMix64::stream(seed, 1);
    let r = &mut rng;
    let mut lines = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor<f64>>, f: &Builder<'_>| -> Result<()> {
        lines.push(checker.line(name, &inputs, f)?);
        Ok(())
    };

    push(
        "op add (broadcast)",
        vec![random(&[2, 3, 4], r), random(&[3, 1], r)],
        &|g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 11)
        },
    )?;
    push("op sub", vec![random(&[3, 4], r), random(&[4], r)], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, 12)
    })?;
    push(
        "op mul (broadcast)",
        vec![random(&[2, 3, 4], r), random(&[4], r)],
        &|g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 13)
        },
    )?;
    let denom = Tensor::from_fn([3, 1], |_| r.uniform(0.5, 2.0));
    push("op div", vec![random(&[3, 4], r), denom], &|g, v| {
        let y = g.div(v[0], v[1])?;
        probe(g, y, 14)
    })?;
    push("op affine", vec![random(&[5], r)], &|g, v| {
        let y = g.affine(v[0], 1.7, -0.3);
        probe(g, y, 15)
    })?;
    push("op sigmoid", vec![random(&[6], r)], &|g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 16)
    })?;
    push("op tanh", vec![random(&[6], r)], &|g, v| {
        let y = g.tanh(v[0]);
        probe(g, y, 17)
    })?;
    push("op relu", vec![away_from_zero(&[8], r)], &|g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 18)
    })?;
    push("op matmul", vec![random(&[3, 4], r), random(&[4, 2], r)], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 19)
    })?;
    push("op transpose", vec![random(&[3, 4], r)], &|g, v| {
        let y = g.transpose(v[0])?;
        probe(g, y, 20)
    })?;
    push("op softmax", vec![random(&[2, 4, 3], r)], &|g, v| {
        let y = g.softmax(v[0], 1)?;
        probe(g, y, 21)
    })?;
    push("op log_softmax", vec![random(&[3, 4], r)], &|g, v| {
        let y = g.log_softmax(v[0], 1)?;
        probe(g, y, 22)
    })?;
    push(
        "op conv2d stride 1",
        vec![random(&[1, 2, 5, 5], r), random(&[3, 2, 3, 3], r)],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            probe(g, y, 23)
        },
    )?;
    push(
        "op conv2d stride 2",
        vec![random(&[2, 2, 6, 6], r), random(&[2, 2, 3, 3], r)],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            probe(g, y, 24)
        },
    )?;
    push("op upsample_nearest", vec![random(&[1, 2, 2, 3], r)], &|g, v| {
        let y = g.upsample_nearest(v[0], 2)?;
        probe(g, y, 25)
    })?;
    push("op reduce sum", vec![random(&[2, 3, 4], r)], &|g, v| {
        let y = g.sum(v[0], &[0, 2])?;
        probe(g, y, 26)
    })?;
    push("op reduce mean", vec![random(&[2, 3, 4], r)], &|g, v| {
        let y = g.mean(v[0], &[1])?;
        probe(g, y, 27)
    })?;
    push("op concat", vec![random(&[2, 3], r), random(&[2, 2], r)], &|g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        probe(g, y, 28)
    })?;
    push("op gather_rows (duplicates)", vec![random(&[4, 3], r)], &|g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
        probe(g, y, 29)
    })?;
    push("op reshape", vec![random(&[2, 6], r)], &|g, v| {
        let y = g.reshape(v[0], [3, 4])?;
        probe(g, y, 30)
    })?;
    push("op permute", vec![random(&[2, 3, 4], r)], &|g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        probe(g, y, 31)
    })?;
    push("op select", vec![random(&[3, 2, 2], r)], &|g, v| {
        let y = g.select(v[0], 1)?;
        probe(g, y, 32)
    })?;
    Ok(lines)
}

/// Per-group lines for one HBIS layer under `Σ w₁⊙F_l + Σ w₂⊙CE_l`.
pub fn hbis_suite(checker: &Checker, seed: u64) -> Result<Vec<CheckLine>> {
    let (pixels, n, c_feat, c_class) = (16, 3, 6, 5);
    let mut rng = SplitMix64::stream(seed, 2);
    let mut params = HbisParams::<Tensor<f64>>::init(c_feat, c_class, &mut rng);
    // move the blend off its mostly-residual start so both branches matter
    params.alpha = Tensor::scalar(0.3);
    for lin in [
        &mut params.query,
        &mut params.context,
        &mut params.gate,
        &mut params.scale,
        &mut params.shift,
    ] {
        lin.bias = random(lin.bias.shape(), &mut rng);
    }
    let features = random(&[pixels, c_feat], &mut rng);
    let embeddings = random(&[n, c_class], &mut rng);
    let topk = TopKConfig { ratio: 0.25, eps: 1e-6 };

    let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
    params.visit("hbis", &mut |name, t| named.push((name, t.clone())));
    named.push(("hbis.input.features".into(), features));
    named.push(("hbis.input.embeddings".into(), embeddings));
    let inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.clone()).collect();
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let k = v.len();
        let mut it = v[..k - 2].iter().copied();
        let p = params.map(&mut |_| it.next().expect("one var per array"));
        let out = hbis_forward(g, v[k - 2], v[k - 1], &p, &topk)?;
        let a = probe(g, out.features, 41)?;
        let b = probe(g, out.embeddings, 42)?;
        g.add(a, b)
    };
    let errs = checker.errors(&inputs, &build)?;
    Ok(group_lines(&named, &errs, group_of_hbis))
}

fn group_of_hbis(name: &str) -> String {
    // "hbis.query.weight" → "hbis query"; inputs stay separate
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    let group = parts.next().unwrap_or_default();
    if group == "input" {
        return format!("{head} d/d{}", parts.next().unwrap_or_default());
    }
    format!("{head} {group}")
}

fn group_lines(named: &[(String, Tensor<f64>)], errs: &[InputError], group: impl Fn(&str) -> String) -> Vec<CheckLine> {
    let mut lines: Vec<CheckLine> = Vec::new();
    for ((name, t), e) in named.iter().zip(errs) {
        let key = group(name);
        match lines.iter_mut().find(|l| l.component == key) {
            Some(l) => {
                l.max_rel_err = l.max_rel_err.max(e.max_rel_err);
                l.elements += t.len();
                l.skipped += e.skipped;
            }
            None => lines.push(CheckLine {
                component: key,
                max_rel_err: e.max_rel_err,
                elements: t.len(),
                skipped: e.skipped,
            }),
        }
    }
    lines
}

/// Loss functions against their inputs.
pub fn loss_suite(checker: &Checker, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = SplitMix64::stream(seed, 3);
    let (b, n, h, w) = (2, 3, 4, 4);
    let labels: Vec<u8> = (0..b * h * w).map(|_| rng.range(0, n - 1) as u8).collect();
    let mut lines = Vec::new();
    let logits = random(&[b, n, h, w], &mut rng);
    lines.push(
        checker.line("loss cross_entropy", std::slice::from_ref(&logits), &|g, v| {
            cross_entropy(g, v[0], &labels, None)
        })?,
    );
    lines.push(checker.line("loss dice", std::slice::from_ref(&logits), &|g, v| {
        let p = g.softmax(v[0], 1)?;
        dice_loss(g, p, &labels, None)
    })?);
    let coarse = random(&[b, n, 2, 2], &mut rng);
    lines.push(checker.line(
        "loss heatmap",
        &[coarse.clone(), random(&[b, n, 2, 2], &mut rng)],
        &|g, v| heatmap_loss(g, v, &labels, (h, w), None),
    )?);
    lines.push(checker.line(
        "loss fisher",
        &[random(&[3, n, 4], &mut rng), random(&[3, n, 4], &mut rng)],
        &|g, v| fisher_loss(g, v, 1e-6),
    )?);
    Ok(lines)
}

/// Model configuration of the end-to-end check: 16×16 inputs, three
/// categories, a 4×4 feature grid with four pixels per Top-K region.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        num_categories: 3,
        c_feat: 6,
        c_class: 5,
        hbis_layers: 2,
        encoder_widths: vec![4, 6, 6],
        downsample: 4,
        topk_ratio: 0.25,
        topk_eps: 1e-6,
        image_size: 16,
    }
}

/// `L_total` on a 2×3×16×16 batch, one line per parameter group.
pub fn end_to_end_suite(checker: &Checker, seed: u64) -> Result<Vec<CheckLine>> {
    let cfg = end_to_end_config();
    let mut rng = SplitMix64::stream(seed, 4);
    let mut params = ModelParams::<Tensor<f64>>::init(&cfg, seed)?;
    for layer in &mut params.layers {
        layer.alpha = Tensor::scalar(rng.uniform(-0.5, 0.5));
    }
    let images = Tensor::from_fn([2, 3, 16, 16], |_| rng.uniform(0.0, 1.0));
    let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.range(0, 2) as u8).collect();
    let weights = LossWeights::default();
    let named: Vec<(String, Tensor<f64>)> = params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.clone()).collect();
    let template = params.clone();
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut it = v.iter().copied();
        let bound = template.map(&mut |_| it.next().expect("one var per array"));
        let x = g.constant(images.clone());
        let out = model::forward(g, &bound, &cfg, x)?;
        let scores: Vec<Var> = out.layers.iter().map(|l| l.scores).collect();
        let emb: Vec<Var> = out.layers.iter().map(|l| l.embeddings).collect();
        let terms = total_loss(
            g,
            LossInputs {
                logits: out.logits_full,
                probs: out.probs,
                labels: &labels,
                score_maps: &scores,
                embeddings: &emb,
            },
            &weights,
        )?;
        Ok(terms.total)
    };
    let errs = checker.errors(&inputs, &build)?;
    Ok(group_lines(&named, &errs, |name| {
        let parts: Vec<&str> = name.split('.').collect();
        let group = match parts.as_slice() {
            [single] => single.to_string(),
            ["head", ..] => "head".into(),
            [a, b, ..] => format!("{a}.{b}"),
            [] => String::new(),
        };
        format!("L_total d/d{group}")
    }))
}

/// Runs every suite.
pub fn run(seed: u64, eps: f64, fault: Option<AdjointFault>) -> Result<Report> {
    let checker = Checker::new(eps, fault);
    let mut lines = op_suite(&checker, seed)?;
    lines.extend(hbis_suite(&checker, seed)?);
    lines.extend(loss_suite(&checker, seed)?);
    lines.extend(end_to_end_suite(&checker, seed)?);
    Ok(Report { lines })
}
