//! Finite-difference gradient checking.
//!
//! The finite-difference side only ever runs forward passes, so it is an
//! independent oracle for whatever the backward pass computes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// Largest relative error over all probed directions.
    pub max_rel_error: f64,
    pub directions: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error with a floor so two near-zero values compare as equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_like(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compares analytic vector-Jacobian products against central differences
/// along `directions` random input directions, each paired with a random
/// output cotangent.
pub fn gradcheck<F>(
    inputs: &[Tensor],
    build: F,
    h: f64,
    directions: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..directions {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let cot = random_like(&mut rng, tape.value(out).numel());
        tape.backward_seeded(&[(out, cot.clone())])?;
        let dirs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| random_like(&mut rng, t.numel()))
            .collect();
        let analytic: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(&v, d)| {
                let g = tape.grad(v).expect("leaf gradient");
                g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();

        let eval = |sign: f64| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let data = x
                        .data()
                        .iter()
                        .zip(d)
                        .map(|(a, b)| a + sign * h * b)
                        .collect();
                    t.constant(Tensor::new(x.shape().to_vec(), data).expect("same shape"))
                })
                .collect();
            let o = build(&mut t, &vs)?;
            Ok(t.value(o).data().iter().zip(&cot).map(|(a, b)| a * b).sum())
        };
        let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * h);
        max_rel = max_rel.max(rel_error(analytic, numeric));
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        directions,
    })
}

/// One differentiable op wired up with random inputs, for gradient checking.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_like(rng, n)).expect("shape")
}

/// Coordinates whose pixel-space position stays at least 0.1 px away from
/// the integer lattice, so a finite-difference stencil never straddles an
/// interpolation cell boundary.
fn off_lattice_coords(rng: &mut ChaCha8Rng, n: usize, extent: usize) -> Tensor {
    let data = (0..n)
        .map(|_| {
            let cell = rng.gen_range(-1i64..extent as i64) as f64;
            let px = cell + rng.gen_range(0.1..0.9);
            (px + 0.5) / extent as f64
        })
        .collect();
    Tensor::vector(data)
}

/// Every differentiable tape op, each with freshly drawn inputs.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m34 = |r: &mut ChaCha8Rng| rand_tensor(r, &[3, 4]);
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![m34(r), rand_tensor(r, &[4, 2])],
            build: |t, v| t.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add",
            inputs: vec![m34(r), m34(r)],
            build: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: vec![m34(r), m34(r)],
            build: |t, v| t.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: vec![m34(r), m34(r)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            inputs: vec![m34(r), rand_tensor(r, &[4])],
            build: |t, v| t.add_row(v[0], v[1]),
        },
        OpCase {
            name: "mul_row",
            inputs: vec![m34(r), rand_tensor(r, &[4])],
            build: |t, v| t.mul_row(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.scale(v[0], -1.7)),
        },
        OpCase {
            name: "relu",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.relu(v[0])),
        },
        OpCase {
            name: "sigmoid",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.sigmoid(v[0])),
        },
        OpCase {
            name: "sin",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.sin(v[0])),
        },
        OpCase {
            name: "cos",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.cos(v[0])),
        },
        OpCase {
            name: "softmax",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.softmax(v[0])),
        },
        OpCase {
            name: "layernorm",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.layernorm(v[0], super::LAYERNORM_EPS)),
        },
        OpCase {
            name: "concat_cols",
            inputs: vec![m34(r), rand_tensor(r, &[3, 2])],
            build: |t, v| t.concat_cols(&[v[0], v[1]]),
        },
        OpCase {
            name: "concat_rows",
            inputs: vec![m34(r), rand_tensor(r, &[2, 4])],
            build: |t, v| t.concat_rows(&[v[0], v[1]]),
        },
        OpCase {
            name: "slice_cols",
            inputs: vec![m34(r)],
            build: |t, v| t.slice_cols(v[0], 1, 2),
        },
        OpCase {
            name: "slice_rows",
            inputs: vec![m34(r)],
            build: |t, v| t.slice_rows(v[0], 1, 2),
        },
        OpCase {
            name: "gather_cols",
            inputs: vec![m34(r)],
            build: |t, v| t.gather_cols(v[0], &[3, 0, 0, 2]),
        },
        OpCase {
            name: "gather_rows",
            inputs: vec![m34(r)],
            build: |t, v| t.gather_rows(v[0], &[2, 2, 0]),
        },
        OpCase {
            name: "transpose",
            inputs: vec![m34(r)],
            build: |t, v| t.transpose(v[0]),
        },
        OpCase {
            name: "reshape",
            inputs: vec![m34(r)],
            build: |t, v| t.reshape(v[0], &[2, 6]),
        },
        OpCase {
            name: "bilinear_sample",
            inputs: vec![
                rand_tensor(r, &[3, 4, 2]),
                off_lattice_coords(r, 6, 4),
                off_lattice_coords(r, 6, 3),
            ],
            build: |t, v| t.bilinear_sample(v[0], v[1], v[2]),
        },
        OpCase {
            name: "group_weighted_sum",
            inputs: vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[6, 4])],
            build: |t, v| t.group_weighted_sum(v[0], v[1]),
        },
        OpCase {
            name: "sum",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.sum(v[0])),
        },
        OpCase {
            name: "mean",
            inputs: vec![m34(r)],
            build: |t, v| Ok(t.mean(v[0])),
        },
    ]
}
