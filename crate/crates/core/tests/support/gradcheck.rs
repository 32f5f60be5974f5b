//! Central finite differences against the tape's reverse pass, shared by the
//! gradient tests and the acceptance run.

use rome_core::rng::{rng_at, Rng, StreamRng};
use rome_core::space::{
    forward_single_path, sample_architecture_hard, ArchParams, CellSpec, NetworkSpec, OpSetName,
    SampledArchitecture, SearchMethod, SupernetWeights,
};
use rome_core::tensor::{Binder, Graph, Tensor, Var};
use rome_core::Result;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 100;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// `sum(f(inputs) * r)` for a fixed random `r`, so every output element
/// contributes with a distinct weight.
fn weighted_loss(graph: &mut Graph, inputs: &[Tensor], f: &Build, r: &Tensor) -> Result<(Var, Vec<Var>)> {
    let vars = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(graph, &vars)?;
    let r = graph.constant(r.clone())?;
    let prod = graph.mul(out, r)?;
    Ok((graph.sum(prod)?, vars))
}

/// Norm-wise relative error between reverse-mode and numeric gradients.
fn check(inputs: Vec<Tensor>, f: &Build, rng: &mut StreamRng) -> f64 {
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone()).unwrap()).collect();
    let out = f(&mut probe, &vars).unwrap();
    let shape = probe.value(out).shape().to_vec();
    let len = shape.iter().product();
    let r = Tensor::new(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap();

    let mut graph = Graph::new();
    let (loss, vars) = weighted_loss(&mut graph, &inputs, f, &r).unwrap();
    let grads = graph.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let (l, _) = weighted_loss(&mut g, inputs, f, &r).unwrap();
        g.value(l).data()[0]
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    relative(diff, na, nn)
}

/// `|a - n| / (|a| + |n|)` from squared norms; zero when both vanish.
fn relative(diff: f64, na: f64, nn: f64) -> f64 {
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

fn random(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()).unwrap()
}

/// Values with magnitude in [0.5, 2] and random sign.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.5, 2.0);
    for x in t.data_mut() {
        if rng.random::<bool>() {
            *x = -*x;
        }
    }
    t
}

fn dims(rng: &mut StreamRng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// Worst error of one check over its random points.
#[derive(Clone, Debug)]
pub struct Summary {
    pub name: &'static str,
    pub points: u64,
    pub worst: f64,
}

type Case = (&'static str, Box<dyn Fn(&mut StreamRng) -> (Vec<Tensor>, Box<Build>)>);

fn case(name: &'static str, make: impl Fn(&mut StreamRng) -> (Vec<Tensor>, Box<Build>) + 'static) -> Case {
    (name, Box::new(make))
}

pub fn run(name: &'static str, make: &dyn Fn(&mut StreamRng) -> (Vec<Tensor>, Box<Build>)) -> Summary {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_at(7, name.len() as u64, point);
        let (inputs, f) = make(&mut rng);
        worst = worst.max(check(inputs, f.as_ref(), &mut rng));
    }
    Summary { name, points: POINTS, worst }
}

fn binary(build: fn(&mut Graph, Var, Var) -> Result<Var>, away: bool) -> impl Fn(&mut StreamRng) -> (Vec<Tensor>, Box<Build>) {
    move |rng| {
        let (m, n, _) = dims(rng);
        let b = if away { away_from_zero(rng, &[m, n]) } else { random(rng, &[m, n], -2.0, 2.0) };
        (vec![random(rng, &[m, n], -2.0, 2.0), b], Box::new(move |g, v| build(g, v[0], v[1])))
    }
}

/// Every differentiable primitive of the tape.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case("matmul", |rng| {
            let (m, k, n) = dims(rng);
            (
                vec![random(rng, &[m, k], -2.0, 2.0), random(rng, &[k, n], -2.0, 2.0)],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            )
        }),
        case("add", binary(Graph::add, false)),
        case("sub", binary(Graph::sub, false)),
        case("mul", binary(Graph::mul, false)),
        case("div", binary(Graph::div, true)),
        case("relu", |rng| {
            let (m, n, _) = dims(rng);
            // the kink at 0 is hit with probability 0 but not FD-safe nearby
            (vec![away_from_zero(rng, &[m, n])], Box::new(|g, v| g.relu(v[0])))
        }),
        case("exp", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[m, n], -3.0, 3.0)], Box::new(|g, v| g.exp(v[0])))
        }),
        case("log", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[m, n], 0.1, 3.0)], Box::new(|g, v| g.log(v[0])))
        }),
        case("neg", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[m, n], -2.0, 2.0)], Box::new(|g, v| g.neg(v[0])))
        }),
        case("scale", |rng| {
            let (m, n, _) = dims(rng);
            let c = rng.random::<f64>() * 4.0 - 2.0;
            (vec![random(rng, &[m, n], -2.0, 2.0)], Box::new(move |g, v| g.scale(v[0], c)))
        }),
        case("softmax", |rng| {
            let n = rng.random_range(2..8);
            let tau = [0.1, 0.5, 1.0, 10.0][rng.random_range(0..4)];
            (vec![random(rng, &[n], -2.0, 2.0)], Box::new(move |g, v| g.softmax(v[0], tau)))
        }),
        case("log_softmax", |rng| {
            let n = rng.random_range(2..8);
            (vec![random(rng, &[n], -3.0, 3.0)], Box::new(|g, v| g.log_softmax(v[0])))
        }),
        case("cross_entropy", |rng| {
            let (b, c) = (rng.random_range(1..6), rng.random_range(2..6));
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            (vec![random(rng, &[b, c], -3.0, 3.0)], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
        }),
        case("sum", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[m, n], -2.0, 2.0)], Box::new(|g, v| g.sum(v[0])))
        }),
        case("select", |rng| {
            let n = rng.random_range(1..8);
            let i = rng.random_range(0..n);
            (vec![random(rng, &[n], -2.0, 2.0)], Box::new(move |g, v| g.select(v[0], i)))
        }),
        case("expand", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[], -2.0, 2.0)], Box::new(move |g, v| g.expand(v[0], &[m, n])))
        }),
        case("expand_rows", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[n], -2.0, 2.0)], Box::new(move |g, v| g.expand_rows(v[0], m)))
        }),
        case("reshape", |rng| {
            let (m, n, _) = dims(rng);
            (vec![random(rng, &[m * n], -2.0, 2.0)], Box::new(move |g, v| g.reshape(v[0], &[m, n])))
        }),
        case("concat_cols", |rng| {
            let (m, a, b) = dims(rng);
            (
                vec![random(rng, &[m, a], -2.0, 2.0), random(rng, &[m, b], -2.0, 2.0)],
                Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]])),
            )
        }),
    ]
}

/// Linear, relu, linear, relu, linear with biases, into cross-entropy.
pub fn composite_case() -> Case {
    case("mlp3", |rng| {
        let (b, d, h) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(2..6));
        let c = rng.random_range(2..4);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let inputs = vec![
            random(rng, &[b, d], -1.0, 1.0),
            random(rng, &[d, h], -1.0, 1.0),
            random(rng, &[h], -0.5, 0.5),
            random(rng, &[h, h], -1.0, 1.0),
            random(rng, &[h, c], -1.0, 1.0),
            random(rng, &[c], -0.5, 0.5),
        ];
        (
            inputs,
            Box::new(move |g, v| {
                let rows = g.value(v[0]).rows();
                let h1 = g.matmul(v[0], v[1])?;
                let b1 = g.expand_rows(v[2], rows)?;
                let h1 = g.add(h1, b1)?;
                let h1 = g.relu(h1)?;
                let h2 = g.matmul(h1, v[3])?;
                let h2 = g.relu(h2)?;
                let out = g.matmul(h2, v[4])?;
                let b3 = g.expand_rows(v[5], rows)?;
                let out = g.add(out, b3)?;
                g.cross_entropy(out, &labels)
            }),
        )
    })
}

/// The two non-differentiable primitives have gradient contracts instead:
/// `stop_gradient` passes nothing back and `straight_through` passes the
/// upstream gradient to its soft input unchanged. Returns the number of
/// points checked; panics on a violation.
pub fn surrogate_contracts() -> u64 {
    for point in 0..POINTS {
        let mut rng = rng_at(7, 99, point);
        let n = rng.random_range(2..6);
        let x = random(&mut rng, &[n], -2.0, 2.0);
        let r = random(&mut rng, &[n], -1.0, 1.0);

        let mut g = Graph::new();
        let a = g.param(x.clone()).unwrap();
        let s = g.stop_gradient(a).unwrap();
        let rc = g.constant(r.clone()).unwrap();
        let p = g.mul(s, rc).unwrap();
        let l = g.sum(p).unwrap();
        assert_eq!(g.value(s).data(), x.data());
        let grads = g.backward(l).unwrap();
        assert!(grads.get_or_zeros(a, n).iter().all(|v| *v == 0.0));

        let mut hard = vec![0.0; n];
        hard[rng.random_range(0..n)] = 1.0;
        let mut g = Graph::new();
        let a = g.param(x.clone()).unwrap();
        let soft = g.softmax(a, 0.7).unwrap();
        let st = g.straight_through(Tensor::vector(hard.clone()), soft).unwrap();
        assert_eq!(g.value(st).data(), &hard[..]);
        let rc = g.constant(r.clone()).unwrap();
        let p = g.mul(st, rc).unwrap();
        let l = g.sum(p).unwrap();
        let through = g.backward(l).unwrap().get_or_zeros(a, n);

        let mut g = Graph::new();
        let a = g.param(x).unwrap();
        let soft = g.softmax(a, 0.7).unwrap();
        let rc = g.constant(r).unwrap();
        let p = g.mul(soft, rc).unwrap();
        let l = g.sum(p).unwrap();
        assert_eq!(through, g.backward(l).unwrap().get_or_zeros(a, n));
    }
    POINTS
}

/// Full forward of a fixed architecture, row normalization included, with
/// respect to every weight.
pub fn supernet_weights(points: u64) -> Summary {
    let spec = NetworkSpec {
        cell: CellSpec::new(2, OpSetName::S0.ops(), 8),
        input_dim: 3,
        num_classes: 3,
        num_cells: 3,
    };
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut rng = rng_at(11, 0, point);
        let weights = SupernetWeights::init(&spec, &mut rng).unwrap();
        let params = ArchParams::init(SearchMethod::RomeV2, spec.cell.clone(), &mut rng).unwrap();
        let choice = sample_architecture_hard(&params, &mut rng).unwrap();
        let x = random(&mut rng, &[4, 3], -1.0, 1.0);
        let y = vec![0, 1, 2, 1];
        let loss_of = |w: &SupernetWeights| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let mut theta = Binder::new(w.tensors(), true);
            let arch = SampledArchitecture::fixed(choice.clone());
            let out = forward_single_path(&mut g, w, &mut theta, &arch, &x, &mut rng_at(0, 0, 0)).unwrap();
            let loss = g.cross_entropy(out.logits, &y).unwrap();
            let grads = theta.gradients(&g.backward(loss).unwrap());
            (g.value(loss).data()[0], grads)
        };
        let (_, analytic) = loss_of(&weights);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (i, t) in weights.tensors().iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = weights.clone();
                plus.tensors_mut()[i].data_mut()[j] += STEP;
                let mut minus = weights.clone();
                minus.tensors_mut()[i].data_mut()[j] -= STEP;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * STEP);
                diff += (analytic[i][j] - numeric).powi(2);
                na += analytic[i][j].powi(2);
                nn += numeric.powi(2);
            }
        }
        worst = worst.max(relative(diff, na, nn));
    }
    Summary { name: "supernet", points, worst }
}
