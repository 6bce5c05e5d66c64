//! Reusable verification routines: finite-difference checks of every graph
//! primitive and of the full training loss, and the discrete MI oracle.

use crate::harness::{batch_loss, Terms};
use crate::mi::{jsd_objective, optimal_discrete_estimate, DiscreteJoint, MiError, TabularDiscriminator};
use crate::model::{BlockSpec, Heads, ModelConfig, SequenceModel, VideoSequence};
use crate::par::{map_indexed, Exec};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, RngStream, Tensor, TensorError, Var};

type Build = fn(&mut Graph<f64>, &[Var], &mut RngStream) -> Result<Var, TensorError>;

/// Input shapes plus value transform for one random instance of a primitive.
struct Case {
    shapes: Vec<Vec<usize>>,
    /// Maps a standard normal draw to a valid input value (e.g. away from kinks).
    value: fn(f64) -> f64,
}

fn away_from_zero(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.05)
}

fn positive(x: f64) -> f64 {
    x.abs() + 0.2
}

fn identity(x: f64) -> f64 {
    x
}

fn dims(rng: &mut RngStream, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.int_in(lo, hi)).collect()
}

struct Primitive {
    name: &'static str,
    case: fn(&mut RngStream) -> Case,
    build: Build,
}

fn unary(rng: &mut RngStream, value: fn(f64) -> f64) -> Case {
    let r = rng.int_in(1, 3);
    Case {
        shapes: vec![dims(rng, r, 1, 4)],
        value,
    }
}

fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "add",
            case: |r| {
                let s = dims(r, 3, 1, 4);
                // broadcast the second operand over the leading axis
                Case {
                    shapes: vec![s.clone(), vec![1, s[1], s[2]]],
                    value: identity,
                }
            },
            build: |g, v, _| g.add(v[0], v[1]),
        },
        Primitive {
            name: "sub",
            case: |r| {
                let s = dims(r, 2, 1, 5);
                Case {
                    shapes: vec![s.clone(), s],
                    value: identity,
                }
            },
            build: |g, v, _| g.sub(v[0], v[1]),
        },
        Primitive {
            name: "mul",
            case: |r| {
                let s = dims(r, 3, 1, 4);
                Case {
                    shapes: vec![s.clone(), vec![s[0], s[1], 1]],
                    value: identity,
                }
            },
            build: |g, v, _| g.mul(v[0], v[1]),
        },
        Primitive {
            name: "scale",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.scale(v[0], -1.7)),
        },
        Primitive {
            name: "add_scalar",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.add_scalar(v[0], 0.3)),
        },
        Primitive {
            name: "matmul",
            case: |r| {
                let d = dims(r, 3, 1, 5);
                Case {
                    shapes: vec![vec![d[0], d[1]], vec![d[1], d[2]]],
                    value: identity,
                }
            },
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        Primitive {
            name: "linear",
            case: |r| {
                let d = dims(r, 3, 1, 5);
                Case {
                    shapes: vec![vec![d[0], d[1]], vec![d[1], d[2]], vec![d[2]]],
                    value: identity,
                }
            },
            build: |g, v, _| g.linear(v[0], v[1], v[2]),
        },
        Primitive {
            name: "relu",
            case: |r| unary(r, away_from_zero),
            build: |g, v, _| Ok(g.relu(v[0])),
        },
        Primitive {
            name: "sigmoid",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.sigmoid(v[0])),
        },
        Primitive {
            name: "tanh",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.tanh(v[0])),
        },
        Primitive {
            name: "softplus",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.softplus(v[0])),
        },
        Primitive {
            name: "log",
            case: |r| unary(r, positive),
            build: |g, v, _| Ok(g.log(v[0])),
        },
        Primitive {
            name: "exp",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.exp(v[0])),
        },
        Primitive {
            name: "clamp",
            case: |r| unary(r, |x| {
                // keep clear of the bounds at +-0.5
                let y = away_from_zero(x);
                if (y.abs() - 0.5).abs() < 0.05 {
                    y * 1.3
                } else {
                    y
                }
            }),
            build: |g, v, _| Ok(g.clamp(v[0], -0.5, 0.5)),
        },
        Primitive {
            name: "softmax",
            case: |r| Case {
                shapes: vec![dims(r, 2, 1, 5)],
                value: identity,
            },
            build: |g, v, _| Ok(g.softmax(v[0])),
        },
        Primitive {
            name: "log_softmax",
            case: |r| Case {
                shapes: vec![dims(r, 2, 1, 5)],
                value: identity,
            },
            build: |g, v, _| Ok(g.log_softmax(v[0])),
        },
        Primitive {
            name: "sum",
            case: |r| unary(r, identity),
            build: |g, v, _| Ok(g.sum(v[0])),
        },
        Primitive {
            name: "mean",
            case: |r| Case {
                shapes: vec![dims(r, 4, 1, 3)],
                value: identity,
            },
            build: |g, v, _| g.mean(v[0], &[1, 2]),
        },
        Primitive {
            name: "reshape",
            case: |r| Case {
                shapes: vec![dims(r, 3, 1, 4)],
                value: identity,
            },
            build: |g, v, _| {
                let n = g.value(v[0]).len();
                g.reshape(v[0], &[n])
            },
        },
        Primitive {
            name: "concat",
            case: |r| {
                let s = dims(r, 3, 1, 4);
                let mut t = s.clone();
                t[1] = r.int_in(1, 3);
                Case {
                    shapes: vec![s, t],
                    value: identity,
                }
            },
            build: |g, v, _| g.concat(&[v[0], v[1]], 1),
        },
        Primitive {
            name: "slice",
            case: |r| {
                let mut s = dims(r, 3, 1, 4);
                s[2] = r.int_in(2, 5);
                Case {
                    shapes: vec![s],
                    value: identity,
                }
            },
            build: |g, v, _| {
                let n = g.shape(v[0])[2];
                g.slice(v[0], 2, 1, n - 1)
            },
        },
        Primitive {
            name: "reverse",
            case: |r| Case {
                shapes: vec![dims(r, 3, 1, 4)],
                value: identity,
            },
            build: |g, v, _| g.reverse(v[0], 1),
        },
        Primitive {
            name: "dropout",
            case: |r| unary(r, identity),
            build: |g, v, rng| g.dropout(v[0], 0.6, rng),
        },
        Primitive {
            name: "conv3d",
            case: |r| {
                let (n, t, h, c, o) = (r.int_in(1, 2), r.int_in(2, 4), r.int_in(4, 6), r.int_in(1, 2), r.int_in(1, 3));
                Case {
                    shapes: vec![vec![n, t, h, h, c], vec![3, 3, 3, c, o], vec![o]],
                    value: identity,
                }
            },
            build: |g, v, _| g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1]),
        },
        Primitive {
            name: "conv2d",
            case: |r| {
                let (n, h, c, o) = (r.int_in(1, 2), r.int_in(3, 6), r.int_in(1, 3), r.int_in(1, 3));
                Case {
                    shapes: vec![vec![n, h, h, c], vec![3, 3, c, o], vec![o]],
                    value: identity,
                }
            },
            build: |g, v, _| g.conv2d(v[0], v[1], Some(v[2]), [1, 1], [1, 1]),
        },
        Primitive {
            name: "max_pool2d",
            case: |r| {
                let (n, h, c) = (r.int_in(1, 2), 2 * r.int_in(1, 3), r.int_in(1, 3));
                Case {
                    shapes: vec![vec![n, h, h, c]],
                    value: identity,
                }
            },
            build: |g, v, _| g.max_pool2d(v[0], [2, 2], [2, 2]),
        },
        Primitive {
            name: "gru_cell",
            case: |r| {
                let (b, h) = (r.int_in(1, 3), r.int_in(1, 4));
                Case {
                    shapes: vec![vec![b, 3 * h], vec![b, h], vec![h, 3 * h], vec![3 * h]],
                    value: identity,
                }
            },
            build: |g, v, _| g.gru_cell(v[0], v[1], v[2], v[3]),
        },
        Primitive {
            name: "lstm_cell",
            case: |r| {
                let (b, h) = (r.int_in(1, 3), r.int_in(1, 4));
                Case {
                    shapes: vec![vec![b, 4 * h], vec![b, 2 * h], vec![h, 4 * h], vec![4 * h]],
                    value: identity,
                }
            },
            build: |g, v, _| g.lstm_cell(v[0], v[1], v[2], v[3]),
        },
    ]
}

pub fn primitive_names() -> Vec<&'static str> {
    primitives().iter().map(|p| p.name).collect()
}

/// Checks one primitive on `shapes` random instances. The scalar under test
/// is `Σ w ⊙ op(inputs)` with fixed random `w`, so every output element matters.
pub fn check_primitive(name: &str, shapes: usize, seed: u64) -> Result<Vec<GradCheckReport>, TensorError> {
    let prim = primitives().into_iter().find(|p| p.name == name).ok_or_else(|| TensorError::Domain {
        op: "check_primitive",
        detail: format!("unknown primitive `{name}`"),
    })?;
    let mut reports = Vec::with_capacity(shapes);
    for k in 0..shapes {
        let mut rng = RngStream::new(seed, 0x6763_6b00).derive(k as u64 * 131 + name.len() as u64);
        let case = (prim.case)(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = case
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.insert(&format!("{name}.in{i}"), Tensor::from_fn(s, |_| (case.value)(rng.normal()))))
            .collect::<Result<_, _>>()?;
        let op_rng = rng.derive(7);
        let weight_rng = rng.derive(8);
        let build = prim.build;
        let report = grad_check(
            &mut store,
            |g, st| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
                let out = build(g, &vars, &mut op_rng.clone())?;
                let mut wr = weight_rng.clone();
                let w = g.input(Tensor::from_fn(g.shape(out), |_| wr.uniform_in(0.5, 1.5)));
                let y = g.mul(out, w)?;
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Smallest model with every component of the desk architecture (3D conv,
/// projection and identity residual blocks, three bidirectional layers,
/// weight head, both discriminators).
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        input_size: 16,
        conv3d_channels: 3,
        blocks: vec![BlockSpec { channels: 3, stride: 1 }, BlockSpec { channels: 4, stride: 2 }],
        hidden: 3,
        gru_layers: 3,
        head_hidden: 3,
        classes: 3,
        keep_prob: 0.5,
        lmim_hidden: 4,
        gmim_hidden: 4,
        ..ModelConfig::desk()
    }
}

/// Central-difference step for the full-model check; small enough that the
/// probe rarely crosses a ReLU or max-pool kink.
pub const FULL_LOSS_STEP: f64 = 1e-6;

/// Finite-difference check of the full training loss (`CE - L_LMIM - L_GMIM`,
/// dropout active with a fixed mask) on a two-sequence batch in f64.
pub fn check_full_loss(config: ModelConfig, batch: &[VideoSequence], opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError> {
    let mut model = SequenceModel::<f64>::new(config, Heads { lmim: true, gmim: true }, opts.seed)?;
    let refs: Vec<&VideoSequence> = batch.iter().collect();
    let rng = RngStream::new(opts.seed, 0x6675_6c6c);
    let config = model.config.clone();
    grad_check(
        &mut model.params,
        |g, st| {
            let m = SequenceModel {
                config: config.clone(),
                params: st.clone(),
            };
            let (graph, loss, _) = batch_loss(&m, &refs, Terms { lmim: true, gmim: true }, &rng)?;
            *g = graph;
            Ok(loss.total)
        },
        opts,
    )
}

/// Random sequences with the extents of `config`, labels `0, 1, ...`.
pub fn random_batch(config: &ModelConfig, n: usize, seed: u64) -> Vec<VideoSequence> {
    let mut rng = RngStream::new(seed, 0x6261_7463);
    let s = config.input_size;
    (0..n)
        .map(|i| {
            let frames = Tensor::from_fn(&[config.frames, 1, s, s], |_| rng.uniform() as f32);
            VideoSequence::new(frames, i % config.classes, None).expect("valid random sequence")
        })
        .collect()
}

/// Result of one discrete MI oracle case.
#[derive(Clone, Debug)]
pub struct OracleCase {
    pub name: String,
    pub trained: f64,
    pub optimal: f64,
}

/// Named oracle joints: independent 2x2, perfectly correlated binary,
/// a soft 2x2 and two random 4x4 tables.
pub fn oracle_joints(seed: u64) -> Vec<(String, DiscreteJoint)> {
    let t = |v: Vec<Vec<f64>>| DiscreteJoint::new(v).expect("valid table");
    let mut rng = RngStream::new(seed, 0x6f72_636c);
    vec![
        ("independent_2x2".into(), t(vec![vec![0.25, 0.25], vec![0.25, 0.25]])),
        ("correlated_binary".into(), t(vec![vec![0.5, 0.0], vec![0.0, 0.5]])),
        ("soft_2x2".into(), t(vec![vec![0.4, 0.1], vec![0.1, 0.4]])),
        ("random_4x4_a".into(), DiscreteJoint::random(4, 4, &mut rng)),
        ("random_4x4_b".into(), DiscreteJoint::random(4, 4, &mut rng)),
    ]
}

/// Trains a tabular discriminator from sampled batches and estimates the
/// objective on fresh samples; cases run under `exec`.
pub fn mi_oracle(seed: u64, exec: Exec) -> Result<Vec<OracleCase>, MiError> {
    let joints = oracle_joints(seed);
    map_indexed(exec, joints.len(), |i| {
        let (name, joint) = &joints[i];
        let mut rng = RngStream::new(seed, 0x6d69).derive(i as u64);
        let mut d = TabularDiscriminator::zeros(joint);
        d.fit_samples(joint, 3000, 256, 2.0, &mut rng)?;
        let paired: Vec<(usize, usize)> = (0..200_000).map(|_| joint.sample(&mut rng)).collect();
        let unpaired = crate::mi::sample_unpaired(&paired, &mut rng)?;
        let trained = jsd_objective(&d.sample_scores(joint, &paired, &unpaired))?;
        Ok(OracleCase {
            name: name.clone(),
            trained,
            optimal: optimal_discrete_estimate(joint),
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_one_shape() {
        for name in primitive_names() {
            let r = check_primitive(name, 1, 3).unwrap();
            assert!(r[0].passed(), "{name}: {}", r[0].max_rel_error());
        }
    }
}
