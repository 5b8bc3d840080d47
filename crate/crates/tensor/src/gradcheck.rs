//! Central finite-difference checks of analytic gradients.
//!
//! Every check reduces the op output to a scalar with a fixed random
//! projection, `loss = Σ out ⊙ r`, so all output elements contribute.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{self, GruVars, LstmVars};
use crate::tensor::Tensor;

/// Below this magnitude errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub op: String,
    pub cases: usize,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn projected_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let r = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = g.constant(r)?;
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn eval(case: &Case, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let loss = projected_loss(&mut g, out, seed)?;
    Ok(g.value(loss).item())
}

/// Compares analytic and numeric gradients of every input element (or at
/// most `max_probes` random elements per input). Returns the worst relative
/// error and the number of probed elements.
pub fn check_case(case: &Case, seed: u64, max_probes: usize) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars = case
        .inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let loss = projected_loss(&mut g, out, seed)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut inputs = case.inputs.clone();
    for k in 0..inputs.len() {
        let n = inputs[k].len();
        let idx: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_probes).into_vec()
        };
        for j in idx {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + eps;
            let fp = eval(case, &inputs, seed)?;
            inputs[k].data_mut()[j] = orig - eps;
            let fm = eval(case, &inputs, seed)?;
            inputs[k].data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k][j], num));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

type Generator = fn(&mut ChaCha8Rng) -> Case;

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    Case {
        inputs: vec![off_zero(rng, &shape)],
        build: Box::new(move |g, v| f(g, v[0])),
    }
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Case {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    let b = if rng.gen_bool(0.25) {
        uniform(rng, &[1], -1.0, 1.0)
    } else {
        uniform(rng, &shape, -1.0, 1.0)
    };
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0), b],
        build: Box::new(move |g, v| f(g, v[0], v[1])),
    }
}

fn gru_case(rng: &mut ChaCha8Rng) -> Case {
    let (i, h) = (dim(rng, 1, 5), dim(rng, 1, 5));
    Case {
        inputs: vec![
            uniform(rng, &[i], -1.0, 1.0),
            uniform(rng, &[h], -1.0, 1.0),
            uniform(rng, &[3 * h, i], -0.8, 0.8),
            uniform(rng, &[3 * h, h], -0.8, 0.8),
            uniform(rng, &[3 * h], -0.5, 0.5),
            uniform(rng, &[3 * h], -0.5, 0.5),
        ],
        build: Box::new(|g, v| {
            let p = GruVars {
                w_ih: v[2],
                w_hh: v[3],
                b_ih: v[4],
                b_hh: v[5],
            };
            nn::gru_cell(g, v[0], v[1], &p)
        }),
    }
}

fn lstm_inputs(rng: &mut ChaCha8Rng, i: usize, h: usize) -> Vec<Tensor<f64>> {
    vec![
        uniform(rng, &[4 * h, i], -0.8, 0.8),
        uniform(rng, &[4 * h, h], -0.8, 0.8),
        uniform(rng, &[4 * h], -0.5, 0.5),
    ]
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Case {
    let (i, h) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let mut inputs = vec![
        uniform(rng, &[i], -1.0, 1.0),
        uniform(rng, &[h], -1.0, 1.0),
        uniform(rng, &[h], -1.0, 1.0),
    ];
    inputs.extend(lstm_inputs(rng, i, h));
    Case {
        inputs,
        build: Box::new(|g, v| {
            let p = LstmVars {
                w_ih: v[3],
                w_hh: v[4],
                b: v[5],
            };
            let (h2, c2) = nn::lstm_cell(g, v[0], v[1], v[2], &p)?;
            g.concat(&[h2, c2], 0)
        }),
    }
}

fn bilstm_case(rng: &mut ChaCha8Rng) -> Case {
    let (l, i, h) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3));
    let mut inputs = vec![uniform(rng, &[l, i], -1.0, 1.0)];
    inputs.extend(lstm_inputs(rng, i, h));
    inputs.extend(lstm_inputs(rng, i, h));
    Case {
        inputs,
        build: Box::new(|g, v| {
            let f = LstmVars {
                w_ih: v[1],
                w_hh: v[2],
                b: v[3],
            };
            let b = LstmVars {
                w_ih: v[4],
                w_hh: v[5],
                b: v[6],
            };
            nn::bilstm(g, v[0], &f, &b)
        }),
    }
}

fn attention_case(rng: &mut ChaCha8Rng) -> Case {
    let (l, d, dv) = (dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 4));
    Case {
        inputs: vec![
            uniform(rng, &[d], -1.0, 1.0),
            uniform(rng, &[l, d], -1.0, 1.0),
            uniform(rng, &[l, dv], -1.0, 1.0),
        ],
        build: Box::new(|g, v| nn::scaled_dot_attention(g, v[0], v[1], v[2])),
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let (c, o, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let stride = dim(rng, 1, 2);
    let pad = dim(rng, 0, k - 1);
    let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
    let bias = rng.gen_bool(0.5);
    let mut inputs = vec![
        uniform(rng, &[c, h, w], -1.0, 1.0),
        uniform(rng, &[o, c, k, k], -1.0, 1.0),
    ];
    if bias {
        inputs.push(uniform(rng, &[o], -1.0, 1.0));
    }
    Case {
        inputs,
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
    }
}

fn conv_t_case(rng: &mut ChaCha8Rng) -> Case {
    let (c, o, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3));
    let stride = dim(rng, 1, 2);
    let pad = dim(rng, 0, 1);
    let out_pad = if stride > 1 { dim(rng, 0, 1) } else { 0 };
    let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
    let mut inputs = vec![
        uniform(rng, &[c, h, w], -1.0, 1.0),
        uniform(rng, &[c, o, k, k], -1.0, 1.0),
    ];
    if rng.gen_bool(0.5) {
        inputs.push(uniform(rng, &[o], -1.0, 1.0));
    }
    Case {
        inputs,
        build: Box::new(move |g, v| {
            g.conv_transpose2d(v[0], v[1], v.get(2).copied(), stride, pad, out_pad)
        }),
    }
}

fn bn_case(rng: &mut ChaCha8Rng, train: bool) -> Case {
    let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    Case {
        inputs: vec![
            uniform(rng, &[c, h, w], -2.0, 2.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ],
        build: Box::new(move |g, v| {
            if train {
                Ok(g.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
            } else {
                g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            }
        }),
    }
}

fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("matmul", |r| {
            let (a, k, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            Case {
                inputs: vec![
                    uniform(r, &[a, k], -1.0, 1.0),
                    uniform(r, &[k, c], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }),
        ("linear", |r| {
            let (n, i, o) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let batched = r.gen_bool(0.5);
            let x = if batched {
                uniform(r, &[n, i], -1.0, 1.0)
            } else {
                uniform(r, &[i], -1.0, 1.0)
            };
            Case {
                inputs: vec![
                    x,
                    uniform(r, &[o, i], -1.0, 1.0),
                    uniform(r, &[o], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            }
        }),
        ("add", |r| binary(r, |g, a, b| g.add(a, b))),
        ("sub", |r| binary(r, |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(r, |g, a, b| g.mul(a, b))),
        ("scale", |r| unary(r, |g, a| g.scale(a, -1.7))),
        ("add_scalar", |r| unary(r, |g, a| g.add_scalar(a, 0.3))),
        ("relu", |r| unary(r, |g, a| g.relu(a))),
        ("sigmoid", |r| unary(r, |g, a| g.sigmoid(a))),
        ("tanh", |r| unary(r, |g, a| g.tanh(a))),
        ("transpose", |r| unary(r, |g, a| g.transpose(a))),
        ("sum", |r| unary(r, |g, a| g.sum(a))),
        ("mean", |r| unary(r, |g, a| g.mean(a))),
        ("mean_axis", |r| {
            let axis = dim(r, 0, 1);
            let shape = [dim(r, 1, 4), dim(r, 1, 4)];
            Case {
                inputs: vec![uniform(r, &shape, -1.0, 1.0)],
                build: Box::new(move |g, v| g.mean_axis(v[0], axis)),
            }
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            Case {
                inputs: vec![uniform(r, &[a, b], -1.0, 1.0)],
                build: Box::new(move |g, v| g.reshape(v[0], &[b, a])),
            }
        }),
        ("concat", |r| {
            let axis = dim(r, 0, 1);
            let other = dim(r, 1, 3);
            let parts = dim(r, 1, 3);
            let inputs = (0..parts)
                .map(|_| {
                    let n = dim(r, 1, 3);
                    let shape = if axis == 0 { [n, other] } else { [other, n] };
                    uniform(r, &shape, -1.0, 1.0)
                })
                .collect();
            Case {
                inputs,
                build: Box::new(move |g, v| g.concat(v, axis)),
            }
        }),
        ("slice", |r| {
            let shape = [dim(r, 1, 4), dim(r, 2, 5)];
            let axis = dim(r, 0, 1);
            let start = dim(r, 0, shape[axis] - 1);
            let len = dim(r, 1, shape[axis] - start);
            Case {
                inputs: vec![uniform(r, &shape, -1.0, 1.0)],
                build: Box::new(move |g, v| g.slice(v[0], axis, start, len)),
            }
        }),
        ("softmax", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
            let axis = dim(r, 0, 2);
            Case {
                inputs: vec![uniform(r, &shape, -2.0, 2.0)],
                build: Box::new(move |g, v| g.softmax(v[0], axis)),
            }
        }),
        ("l2_normalize", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4)];
            let axis = dim(r, 0, 1);
            Case {
                inputs: vec![off_zero(r, &shape)],
                build: Box::new(move |g, v| g.l2_normalize(v[0], axis)),
            }
        }),
        ("mse", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4)];
            Case {
                inputs: vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)],
                build: Box::new(|g, v| g.mse(v[0], v[1])),
            }
        }),
        ("cross_entropy", |r| {
            let (c, h, w) = (dim(r, 2, 4), dim(r, 1, 3), dim(r, 1, 3));
            let mut targets: Vec<i32> = (0..h * w).map(|_| r.gen_range(-1..c as i32)).collect();
            targets[0] = r.gen_range(0..c as i32);
            Case {
                inputs: vec![uniform(r, &[c, h, w], 0.05, 1.0)],
                build: Box::new(move |g, v| Ok(g.cross_entropy_per_pixel(v[0], &targets)?.0)),
            }
        }),
        ("kl_divergence", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4)];
            Case {
                inputs: vec![uniform(r, &shape, 0.05, 1.0), uniform(r, &shape, 0.05, 1.0)],
                build: Box::new(|g, v| g.kl_divergence(v[0], v[1])),
            }
        }),
        ("batch_norm_train", |r| bn_case(r, true)),
        ("batch_norm_eval", |r| bn_case(r, false)),
        ("conv2d", conv_case),
        ("conv_transpose2d", conv_t_case),
        ("embedding", |r| {
            let (vocab, d, l) = (dim(r, 2, 6), dim(r, 1, 4), dim(r, 1, 5));
            let ids: Vec<usize> = (0..l).map(|_| r.gen_range(0..vocab)).collect();
            Case {
                inputs: vec![uniform(r, &[vocab, d], -1.0, 1.0)],
                build: Box::new(move |g, v| g.embedding(v[0], &ids)),
            }
        }),
        ("gru_cell", gru_case),
        ("lstm_cell", lstm_case),
        ("bilstm", bilstm_case),
        ("scaled_dot_attention", attention_case),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    generators().into_iter().map(|(n, _)| n).collect()
}

/// Runs `cases` random cases of one op.
pub fn check_op(name: &str, cases: usize, seed: u64) -> Result<Option<CheckReport>> {
    let Some((_, gen)) = generators().into_iter().find(|(n, _)| *n == name) else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for i in 0..cases {
        let case = gen(&mut rng);
        let (e, p) = check_case(&case, seed.wrapping_add(i as u64), 64)?;
        worst = worst.max(e);
        probes += p;
    }
    Ok(Some(CheckReport {
        op: name.to_string(),
        cases,
        probes,
        max_rel_err: worst,
    }))
}

/// The full per-op suite.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    op_names()
        .into_iter()
        .map(|n| check_op(n, cases, seed).map(|r| r.expect("registered op")))
        .collect()
}
