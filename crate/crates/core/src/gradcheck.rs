//! Finite-difference verification of the backward pass, from individual ops
//! up to whole models.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{CrossEncoderModel, MeanPoolBaseline, Model, ModelConfig, VisionEncoderModel};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::LN_EPS;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor for the relative-error denominator so near-zero gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;
pub const TOL_PRIMITIVE: f64 = 1e-6;
pub const TOL_ARCH: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: max_rel_err={:.3e} tol={:.0e} ({} scalars) {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub results: Vec<GradCheckResult>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(GradCheckResult::passed)
    }

    pub fn worst(&self) -> Option<&GradCheckResult> {
        self.results
            .iter()
            .max_by(|a, b| {
                (a.max_rel_err / a.tolerance)
                    .partial_cmp(&(b.max_rel_err / b.tolerance))
                    .expect("finite ratios")
            })
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Like [`rand_tensor`] but bounded away from zero, for ops with a kink there.
fn rand_tensor_offset<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Reduce an arbitrary-shape output to a scalar by contracting against fixed
/// random weights, so every output element influences the loss.
fn contract(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

/// Check d(loss)/d(input) for every scalar of every input against central
/// differences. `f` must build the same scalar loss from the given leaves on
/// every call.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], tol: f64, f: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|v| g.grad_tensor(*v).expect("leaf gradient"))
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(grads[ti].data()[i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        name: name.into(),
        max_rel_err: max_rel,
        tolerance: tol,
        checked,
    })
}

/// Check d(loss)/d(param) for every trainable scalar in `store`. `f` builds
/// the scalar loss from whatever parameter values the store holds.
pub fn check_params<F>(name: &str, store: &ParamStore, tol: f64, f: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    g.write_grads(&mut analytic);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut work = store.clone();
    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic.grad(id)[i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        name: name.into(),
        max_rel_err: max_rel,
        tolerance: tol,
        checked,
    })
}

/// Every differentiable primitive against central differences.
pub fn primitive_suite() -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(414);
    let mut out = Vec::new();

    let a = rand_tensor(&mut rng, vec![4, 5], 1.0);
    let b = rand_tensor(&mut rng, vec![5, 3], 1.0);
    let w = rand_tensor(&mut rng, vec![4, 3], 1.0);
    out.push(check_inputs("matmul", &[a, b], TOL_PRIMITIVE, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        contract(g, m, &w)
    })?);

    let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let w = rand_tensor(&mut rng, vec![3, 4], 1.0);
    out.push(check_inputs("add", &[a.clone(), b.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.add(v[0], v[1])?;
        contract(g, s, &w)
    })?);
    out.push(check_inputs("sub", &[a.clone(), b.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.sub(v[0], v[1])?;
        contract(g, s, &w)
    })?);
    out.push(check_inputs("mul", &[a.clone(), b], TOL_PRIMITIVE, |g, v| {
        let s = g.mul(v[0], v[1])?;
        contract(g, s, &w)
    })?);
    out.push(check_inputs("mul_scalar", &[a.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.mul_scalar(v[0], -1.7);
        contract(g, s, &w)
    })?);

    let row = rand_tensor(&mut rng, vec![1, 4], 1.0);
    out.push(check_inputs(
        "add_broadcast_row",
        &[a.clone(), row],
        TOL_PRIMITIVE,
        |g, v| {
            let s = g.add_broadcast_row(v[0], v[1])?;
            contract(g, s, &w)
        },
    )?);

    let x = rand_tensor_offset(&mut rng, vec![3, 4]);
    out.push(check_inputs("relu", &[x], TOL_PRIMITIVE, |g, v| {
        let s = g.relu(v[0]);
        contract(g, s, &w)
    })?);

    let x = rand_tensor(&mut rng, vec![16], 2.0);
    let wv = rand_tensor(&mut rng, vec![16], 1.0);
    out.push(check_inputs("gelu", &[x], TOL_PRIMITIVE, |g, v| {
        let s = g.gelu(v[0]);
        contract(g, s, &wv)
    })?);

    let x = rand_tensor(&mut rng, vec![3, 5], 2.0);
    let w35 = rand_tensor(&mut rng, vec![3, 5], 1.0);
    out.push(check_inputs("softmax_last", &[x], TOL_PRIMITIVE, |g, v| {
        let s = g.softmax_last(v[0])?;
        contract(g, s, &w35)
    })?);

    let x = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let w_rows = rand_tensor(&mut rng, vec![4], 1.0);
    let w_cols = rand_tensor(&mut rng, vec![3], 1.0);
    out.push(check_inputs("mean_axis_0", &[x.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.mean_axis(v[0], 0)?;
        contract(g, s, &w_rows)
    })?);
    out.push(check_inputs("mean_axis_1", &[x.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.mean_axis(v[0], 1)?;
        contract(g, s, &w_cols)
    })?);
    out.push(check_inputs("sum_all", &[x.clone()], TOL_PRIMITIVE, |g, v| {
        Ok(g.sum_all(v[0]))
    })?);

    let ln_x = rand_tensor(&mut rng, vec![4, 8], 1.0);
    let gain = rand_tensor(&mut rng, vec![1, 8], 0.5);
    let offset = rand_tensor(&mut rng, vec![1, 8], 0.5);
    let w48 = rand_tensor(&mut rng, vec![4, 8], 1.0);
    out.push(check_inputs(
        "layer_norm",
        &[ln_x, gain, offset],
        TOL_PRIMITIVE,
        |g, v| {
            let s = g.layer_norm(v[0], v[1], v[2], LN_EPS)?;
            contract(g, s, &w48)
        },
    )?);

    let p0 = rand_tensor(&mut rng, vec![2, 3], 1.0);
    let p1 = rand_tensor(&mut rng, vec![1, 3], 1.0);
    let p2 = rand_tensor(&mut rng, vec![3, 3], 1.0);
    let w63 = rand_tensor(&mut rng, vec![6, 3], 1.0);
    out.push(check_inputs(
        "concat_rows",
        &[p0, p1, p2],
        TOL_PRIMITIVE,
        |g, v| {
            let s = g.concat_rows(v)?;
            contract(g, s, &w63)
        },
    )?);

    let c0 = rand_tensor(&mut rng, vec![2, 3], 1.0);
    let c1 = rand_tensor(&mut rng, vec![2, 4], 1.0);
    let w27 = rand_tensor(&mut rng, vec![2, 7], 1.0);
    out.push(check_inputs("concat_cols", &[c0, c1], TOL_PRIMITIVE, |g, v| {
        let s = g.concat_cols(v)?;
        contract(g, s, &w27)
    })?);

    let x = rand_tensor(&mut rng, vec![5, 3], 1.0);
    let w23 = rand_tensor(&mut rng, vec![2, 3], 1.0);
    out.push(check_inputs("slice_rows", &[x], TOL_PRIMITIVE, |g, v| {
        let s = g.slice_rows(v[0], 1, 3)?;
        contract(g, s, &w23)
    })?);

    let x = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let w43 = rand_tensor(&mut rng, vec![4, 3], 1.0);
    out.push(check_inputs("transpose", &[x.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.transpose(v[0])?;
        contract(g, s, &w43)
    })?);

    let w62 = rand_tensor(&mut rng, vec![6, 2], 1.0);
    out.push(check_inputs("reshape", &[x.clone()], TOL_PRIMITIVE, |g, v| {
        let s = g.reshape(v[0], vec![6, 2])?;
        contract(g, s, &w62)
    })?);

    let logits = rand_tensor(&mut rng, vec![7], 2.0);
    out.push(check_inputs("cross_entropy", &[logits], TOL_PRIMITIVE, |g, v| {
        g.cross_entropy(v[0], 3)
    })?);

    // same tensor feeding two operands: adjoints must sum
    let x = rand_tensor(&mut rng, vec![3, 3], 1.0);
    let w33 = rand_tensor(&mut rng, vec![3, 3], 1.0);
    out.push(check_inputs("shared_input", &[x], TOL_PRIMITIVE, |g, v| {
        let sq = g.matmul(v[0], v[0])?;
        let s = g.add(sq, v[0])?;
        contract(g, s, &w33)
    })?);

    Ok(out)
}

fn mini_config() -> ModelConfig {
    ModelConfig {
        h: 8,
        heads: 2,
        vision_layers: 2,
        cross_layers: 1,
        c_prime: 6,
        t_prime: 4,
        n_attributes: 3,
        num_classes: 5,
        h_prime: 2,
        w_prime: 2,
    }
}

/// Move every trainable parameter to a generic random point. The standard
/// initialization is nearly symmetric (tiny weights make attention close to
/// uniform), which drives some analytic gradients below what central
/// differences can resolve; generic weights keep every gradient well above
/// the finite-difference noise floor.
fn randomize_params<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Summed cross-entropy over a few feature/label pairs. A single example can
/// leave an individual weight's gradient near zero by chance, down in the
/// finite-difference noise; summing over independent inputs makes that
/// coincidence vanishingly rare.
fn multi_example_loss<M: Model>(
    g: &mut Graph,
    s: &ParamStore,
    model: &M,
    feats: &[Tensor],
    num_classes: usize,
) -> Result<Var> {
    let mut total = None;
    for (i, f) in feats.iter().enumerate() {
        let fv = g.constant(f.clone());
        let logits = model.forward(g, s, fv)?;
        let ce = g.cross_entropy(logits, i % num_classes)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.expect("at least one example"))
}

/// Whole-model gradient checks on miniature configurations: cross-entropy
/// loss, every trainable parameter perturbed.
pub fn architecture_suite() -> Result<Vec<GradCheckResult>> {
    let cfg = mini_config();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let feats: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(&mut rng, vec![cfg.c_prime, cfg.t_prime], 1.0))
        .collect();
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let model = MeanPoolBaseline::init(&mut store, &cfg, 11)?;
    randomize_params(&mut store, &mut rng, 0.8);
    out.push(check_params("baseline_model", &store, TOL_ARCH, |g, s| {
        multi_example_loss(g, s, &model, &feats, cfg.num_classes)
    })?);

    let mut store = ParamStore::new();
    let model = VisionEncoderModel::init(&mut store, &cfg, 12)?;
    randomize_params(&mut store, &mut rng, 0.8);
    out.push(check_params("vision_model", &store, TOL_ARCH, |g, s| {
        multi_example_loss(g, s, &model, &feats, cfg.num_classes)
    })?);

    let mut store = ParamStore::new();
    let model = CrossEncoderModel::init(&mut store, &cfg, 13)?;
    randomize_params(&mut store, &mut rng, 0.8);
    out.push(check_params("cross_model", &store, TOL_ARCH, |g, s| {
        multi_example_loss(g, s, &model, &feats, cfg.num_classes)
    })?);

    Ok(out)
}

/// Primitive and whole-model checks, as run by the CLI and the acceptance
/// gate.
pub fn run_full_suite() -> Result<GradCheckReport> {
    let mut results = primitive_suite()?;
    results.extend(architecture_suite()?);
    Ok(GradCheckReport { results })
}
