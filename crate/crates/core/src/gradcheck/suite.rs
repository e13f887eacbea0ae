//! Ready-made gradient checks for every tape op and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::losses::{model_loss, LossMode, LossWeights, Targets, SELECT_RATIO};
use crate::model::{forward, predict, ModelConfig, ModelParams, QueryEmbedding, QueryMode};
use crate::nn::{self, Activation};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy)]
enum Domain {
    Signed,
    Positive,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Domain)>,
    build: Build,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<OpCase> {
    use Domain::{Positive as P, Signed as S};
    vec![
        case("matmul", &[(&[3, 4], S), (&[4, 2], S)], |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[(&[2, 3, 4], S), (&[2, 4, 2], S)], |t, v| t.bmm(v[0], v[1])),
        case("transpose", &[(&[2, 3, 4], S)], |t, v| t.transpose(v[0])),
        case("reshape", &[(&[2, 3, 4], S)], |t, v| t.reshape(v[0], &[6, 4])),
        case("add", &[(&[3, 4], S), (&[3, 4], S)], |t, v| t.add(v[0], v[1])),
        case("sub", &[(&[3, 4], S), (&[3, 4], S)], |t, v| t.sub(v[0], v[1])),
        case("mul", &[(&[3, 4], S), (&[3, 4], S)], |t, v| t.mul(v[0], v[1])),
        case("div", &[(&[3, 4], S), (&[3, 4], P)], |t, v| t.div(v[0], v[1])),
        case("add_row", &[(&[2, 3, 4], S), (&[1, 4], S)], |t, v| t.add_row(v[0], v[1])),
        case("add_group", &[(&[2, 3, 4], S), (&[2, 4], S)], |t, v| t.add_group(v[0], v[1])),
        case("mul_col", &[(&[3, 4], S), (&[3, 1], S)], |t, v| t.mul_col(v[0], v[1])),
        case("scale", &[(&[3, 4], S)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("add_scalar", &[(&[3, 4], S)], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        case("elu", &[(&[3, 4], S)], |t, v| Ok(t.elu(v[0]))),
        case("relu", &[(&[3, 4], S)], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[(&[3, 4], S)], |t, v| Ok(t.sigmoid(v[0]))),
        case("log", &[(&[3, 4], P)], |t, v| Ok(t.log(v[0], 1e-12))),
        case("clamp", &[(&[3, 4], S)], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        case("softmax", &[(&[2, 3, 4], S)], |t, v| t.softmax(v[0], 1.6)),
        case("row_normalize", &[(&[3, 4], P)], |t, v| Ok(t.row_normalize(v[0]))),
        case("gcn_normalize", &[(&[2, 4, 4], P)], |t, v| t.gcn_normalize(v[0])),
        case("row_l2_normalize", &[(&[3, 4], S)], |t, v| Ok(t.row_l2_normalize(v[0], 1e-8))),
        case("mean_rows", &[(&[2, 3, 4], S)], |t, v| t.mean_rows(v[0])),
        case("sum", &[(&[3, 4], S)], |t, v| Ok(t.sum(v[0]))),
        case("row_sum_sq", &[(&[3, 4], S)], |t, v| t.row_sum_sq(v[0])),
        case("concat_rows", &[(&[2, 4], S), (&[3, 4], S)], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("concat_cols", &[(&[3, 2], S), (&[3, 4], S)], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("gather_rows", &[(&[5, 3], S)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        case("slice_cols", &[(&[3, 5], S)], |t, v| t.slice_cols(v[0], 1, 4)),
        case("node_norm", &[(&[5, 3], S), (&[1, 3], S), (&[1, 3], S)], |t, v| t.node_norm(v[0], v[1], v[2])),
        case("linear", &[(&[2, 3, 4], S), (&[4, 2], S), (&[1, 2], S)], |t, v| nn::linear(t, v[0], v[1], Some(v[2]))),
        case("graph_conv_elu", &[(&[4, 3], S), (&[4, 4], P), (&[3, 2], S)], |t, v| {
            nn::graph_conv(t, v[0], v[1], v[2], Activation::Elu, true, None)
        }),
        case("graph_conv_softmax_norm", &[(&[2, 4, 3], S), (&[2, 4, 4], P), (&[3, 2], S), (&[1, 2], S), (&[1, 2], S)], |t, v| {
            nn::graph_conv(t, v[0], v[1], v[2], Activation::SoftmaxRows, true, Some((v[3], v[4])))
        }),
        case("cosine_affinity", &[(&[4, 3], S), (&[3, 2], S), (&[3, 2], S)], |t, v| nn::cosine_affinity(t, v[0], v[1], v[2])),
    ]
}

/// Names of the per-op checks run by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

fn fill(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Signed => rng.random_range(-1.0..1.0),
            Domain::Positive => rng.random_range(0.2..1.5),
        })
        .collect();
    Tensor::new(shape, data).expect("product matches")
}

/// Checks every differentiable op on random inputs drawn from `seed`. Each
/// output is reduced by a fixed random weighting so every output entry
/// contributes to the gradient.
pub fn op_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, c) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut store = ParamStore::new();
        let ids: Vec<_> = c
            .inputs
            .iter()
            .enumerate()
            .map(|(k, (shape, dom))| store.add(format!("{}.{k}", c.name), fill(shape, *dom, &mut rng)))
            .collect();
        let weight_seed: u64 = rng.random();
        let build = c.build;
        let f = move |tape: &mut Tape, s: &ParamStore| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = build(tape, &vars)?;
            let shape = tape.shape(y).to_vec();
            let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
            let r = tape.input(fill(&shape, Domain::Signed, &mut wrng));
            let prod = tape.mul(y, r)?;
            Ok(tape.sum(prod))
        };
        let report = gradient_check(c.name, &mut store, opts, f)?;
        out.push(CheckResult {
            name: c.name.to_string(),
            report,
        });
    }
    Ok(out)
}

const SELECTION_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 32;

/// Distance of the keyframe probabilities from the nearest point where the
/// training-time frame selection changes.
fn selection_margin(p1: &[f64]) -> f64 {
    let mut margin = p1.iter().map(|p| (p - 0.5).abs()).fold(f64::INFINITY, f64::min);
    let mut sorted = p1.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((SELECT_RATIO * sorted.len() as f64).ceil() as usize).max(1);
    if k < sorted.len() {
        margin = margin.min(sorted[k - 1] - sorted[k]);
    }
    margin
}

/// Full model plus loss for every query mode and loss mode on random inputs
/// of `frames × objects` with `iterations` refinement steps.
///
/// The frame selection inside the loss is piecewise constant, so inputs are
/// redrawn until every keyframe probability is at least `1e-3` away from a
/// selection boundary.
pub fn model_suite(seed: u64, frames: usize, objects: usize, iterations: usize, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for qm in [QueryMode::None, QueryMode::Word, QueryMode::Sentence] {
        for lm in [LossMode::SupBin, LossMode::SupScore, LossMode::Unsup] {
            let mut cfg = ModelConfig::tiny(qm);
            cfg.frames = frames;
            cfg.objects = objects;
            cfg.iterations = iterations;
            let mut p = ModelParams::init(&cfg, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut attempt = 0;
            let (x, q) = loop {
                let x = fill(&[frames, objects, cfg.d_obj], Domain::Signed, &mut rng);
                let q = match qm {
                    QueryMode::None => QueryEmbedding::none(),
                    _ => QueryEmbedding::new(qm, fill(&[2, cfg.query_dim], Domain::Signed, &mut rng)),
                };
                let (scores, _) = predict(&p, &cfg, &x, &q)?;
                attempt += 1;
                if selection_margin(&scores.keyframe_probs()) >= SELECTION_MARGIN || attempt == MAX_DRAWS {
                    break (x, q);
                }
            };
            let labels: Vec<u8> = (0..frames).map(|t| u8::from(t % 3 == 1)).collect();
            let scores: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = LossWeights::for_mode(lm);
            let mut store = std::mem::take(&mut p.store);
            let name = format!("model/{}/{}", qm.as_str(), lm.as_str());
            let report = gradient_check(&name, &mut store, opts, |tape: &mut Tape, s| {
                let mut pp = p.clone();
                pp.store = s.clone();
                let fwd = forward(tape, &pp, &cfg, &x, &q)?;
                let t = Targets {
                    labels: Some(&labels),
                    scores: Some(&scores),
                };
                Ok(model_loss(tape, &pp, &cfg, &w, &fwd, &x, t)?.total)
            })?;
            out.push(CheckResult { name, report });
        }
    }
    Ok(out)
}

/// A square whose second factor is detached from the tape, so its analytic
/// gradient is half the true one. Used to confirm the checker reports faults.
pub fn faulty_case(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let id = store.add("fault.0", fill(&[3, 4], Domain::Positive, &mut rng));
    let report = gradient_check("fault/detached_square", &mut store, opts, |tape: &mut Tape, s| {
        let x = tape.param(s, id);
        let frozen = tape.input(tape.value(x).clone());
        let y = tape.mul(x, frozen)?;
        Ok(tape.sum(y))
    })?;
    Ok(CheckResult {
        name: "fault/detached_square".into(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        for r in op_suite(1, &GradCheckOptions::default()).unwrap() {
            assert!(r.report.max_rel_error <= 1e-4, "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn weighting_is_fixed_between_evaluations() {
        let a = op_suite(3, &GradCheckOptions::default()).unwrap();
        let b = op_suite(3, &GradCheckOptions::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.report.max_rel_error, y.report.max_rel_error);
        }
    }

    #[test]
    fn detached_factor_is_detected() {
        let r = faulty_case(0, &GradCheckOptions::default()).unwrap();
        assert!((r.report.max_rel_error - 0.5).abs() < 1e-6, "{:?}", r.report);
    }
}
