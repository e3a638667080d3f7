//! Central finite-difference verification of the autodiff engine, run in `f64`.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that coordinates with (near-)zero gradient compare absolutely.
const REL_FLOOR: f64 = 1e-6;
const COMPOSITE_SEED: u64 = 3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar built by `f` with central differences over
/// every coordinate of every input.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let root = f(&mut g, &vars)?;
        Ok((g, vars, root))
    };
    let (g, vars, root) = eval(inputs, true)?;
    let mut grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect();

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let (gp, _, rp) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let (gm, _, rm) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        coordinates,
        max_rel_error: worst,
        passed: worst < REL_TOL,
    })
}

fn random(shape: &[usize], rng: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random entries kept at least 0.05 away from each of `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], rng: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if kinks.iter().all(|k| (v - k).abs() > 0.05) {
            break v;
        }
    })
}

/// Reduces a tensor-valued op to a scalar by projecting onto a fixed random direction.
fn project(g: &mut Graph<f64>, out: Var, rng: &mut rng::Rng) -> Result<Var> {
    let dir = random(g.shape(out), rng);
    let d = g.constant(dir);
    let m = g.mul(out, d)?;
    Ok(g.sum(m))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Gradient checks over every differentiable operator, on small random tensors.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = rng::stream(seed, 0);
    let proj_seed = rng::derive_seed(seed, "projection");
    macro_rules! case {
        ($name:expr, [$($input:expr),*], |$g:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($input),*];
            let f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> = Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| {
                let mut pr = rng::stream(proj_seed, $name.len() as u64);
                let out = $body?;
                if $g.value(out).is_scalar() { Ok(out) } else { project($g, out, &mut pr) }
            });
            ($name, inputs, f) as OpCase
        }};
    }
    let cases: Vec<OpCase> = vec![
        case!("conv2d", [random(&[2, 3, 4, 4], &mut r), random(&[4, 3, 3, 3], &mut r), random(&[4], &mut r)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        case!("conv2d_same", [random(&[1, 2, 4, 4], &mut r), random(&[3, 2, 3, 3], &mut r)],
            |g, v| g.conv2d(v[0], v[1], None, 1, 1)),
        case!("conv_transpose2d", [random(&[2, 3, 3, 3], &mut r), random(&[3, 2, 2, 2], &mut r), random(&[2], &mut r)],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)),
        case!("conv_transpose2d_pad", [random(&[1, 2, 4, 4], &mut r), random(&[2, 3, 3, 3], &mut r)],
            |g, v| g.conv_transpose2d(v[0], v[1], None, 1, 1)),
        case!("linear", [random(&[3, 4], &mut r), random(&[2, 4], &mut r), random(&[2], &mut r)],
            |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case!("matmul", [random(&[3, 4], &mut r), random(&[4, 2], &mut r)], |g, v| g.matmul(v[0], v[1])),
        case!("relu", [away_from(&[2, 3, 4], &[0.0], &mut r)], |g, v| Ok::<_, crate::Error>(g.relu(v[0]))),
        case!("abs", [away_from(&[3, 4], &[0.0], &mut r)], |g, v| Ok::<_, crate::Error>(g.abs(v[0]))),
        case!("clamp", [away_from(&[4, 4], &[-0.5, 0.5], &mut r)], |g, v| g.clamp(v[0], -0.5, 0.5)),
        case!("add", [random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.add(v[0], v[1])),
        case!("sub", [random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.sub(v[0], v[1])),
        case!("mul", [random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.mul(v[0], v[1])),
        case!("scale", [random(&[4], &mut r)], |g, v| Ok::<_, crate::Error>(g.scale(v[0], -1.7))),
        case!("sum", [random(&[2, 2, 3], &mut r)], |g, v| Ok::<_, crate::Error>(g.sum(v[0]))),
        case!("mean", [random(&[2, 2, 3], &mut r)], |g, v| Ok::<_, crate::Error>(g.mean(v[0]))),
        case!("global_avg_pool", [random(&[2, 3, 2, 4], &mut r)], |g, v| g.global_avg_pool(v[0])),
        case!("upsample_nearest2x", [random(&[1, 2, 2, 3], &mut r)], |g, v| g.upsample_nearest2x(v[0])),
        case!("downsample_nearest2x", [random(&[1, 2, 4, 4], &mut r)], |g, v| g.downsample_nearest2x(v[0])),
        case!("resize_bilinear", [random(&[1, 2, 3, 4], &mut r)], |g, v| g.resize_bilinear(v[0], 4, 3)),
        case!("softmax_cross_entropy", [random(&[4, 3], &mut r)], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
        case!("softmax_cross_entropy_dense", [random(&[2, 3, 2, 2], &mut r)],
            |g, v| g.softmax_cross_entropy(v[0], &[0, 1, 2, 2, 1, 0, 0, 1])),
        case!("l1_loss", [away_from(&[3, 4], &[], &mut r), random(&[3, 4], &mut r)], |g, v| g.l1_loss(v[0], v[1])),
        case!("cosine_similarity", [random(&[2, 4], &mut r), random(&[2, 4], &mut r)], |g, v| g.cosine_similarity(v[0], v[1])),
        case!("concat_channels", [random(&[2, 1, 2, 2], &mut r), random(&[2, 3, 2, 2], &mut r)],
            |g, v| g.concat_channels(&[v[0], v[1]])),
        case!("reshape", [random(&[2, 6], &mut r)], |g, v| g.reshape(v[0], &[3, 4])),
        case!("index_select", [random(&[3, 4], &mut r)], |g, v| g.index_select(v[0], &[2, 0, 2])),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_gradients(name, &inputs, f))
        .collect()
}

/// Gradient check of the generator's full training objective (base loss through a
/// surrogate plus both embedding regularizers) with respect to every generator
/// parameter, for an error-minimizing and a targeted base on label tasks and for dense
/// label embedders. The ε-box is wide so that no clip is active.
///
/// Parameters come from a fixed seed: at arbitrary points a ReLU pre-activation can land
/// within one finite-difference step of zero, where the central difference (not the
/// gradient) is off.
pub fn composite_suite() -> Result<Vec<GradCheckReport>> {
    let seed = COMPOSITE_SEED;
    use crate::attacks::pgd::mode_targets;
    use crate::data::{TaskKind, Targets};
    use crate::generator::{composite_loss, BaseUe, GenArch, PerturbGenerator};
    use crate::models::{build_mtl_model, Arch, Block};

    let arch = GenArch {
        encoder: vec![Block { width: 2, stride: 2 }, Block { width: 2, stride: 1 }],
        embed_channels: 2,
        decoder: vec![2],
        upsample_after: 1,
    };
    let label_kinds = vec![TaskKind::Classification { classes: 2 }, TaskKind::Classification { classes: 3 }];
    let label_targets = vec![Targets::Classes(vec![0, 1]), Targets::Classes(vec![2, 0])];
    let dense_kinds = vec![TaskKind::Segmentation { classes: 3 }, TaskKind::Regression];
    let dense_targets = vec![
        Targets::Pixels((0..32).map(|i| i % 3).collect()),
        Targets::Field(Tensor::from_fn([2, 1, 4, 4], |i| (i % 5) as f32 / 4.0)),
    ];
    let cases = [
        ("composite_loss/em", label_kinds.clone(), label_targets.clone(), BaseUe::Em),
        ("composite_loss/tap", label_kinds, label_targets, BaseUe::Tap),
        ("composite_loss/dense_em", dense_kinds, dense_targets, BaseUe::Em),
    ];
    let x = Tensor::<f64>::from_fn([2, 1, 4, 4], |i| 0.3 + 0.4 * ((i * 7) % 13) as f64 / 13.0);
    cases
        .into_iter()
        .map(|(name, kinds, targets, base)| {
            let gen = PerturbGenerator::new(arch.clone(), [1, 4, 4], kinds.clone(), 10.0, rng::derive_seed(seed, "gen"))?;
            // One stride-1 block: valid for per-image and per-pixel heads alike.
            let sur_arch = Arch {
                encoder: vec![Block { width: 2, stride: 1 }],
                decoder: vec![],
            };
            let sur = build_mtl_model(sur_arch, 1, &kinds, rng::derive_seed(seed, "surrogate"))?;
            let (lt, dirs) = mode_targets(&kinds, targets.clone(), base.mode());
            let inputs: Vec<Tensor<f64>> = gen.params().iter().map(|p| p.cast()).collect();
            check_gradients(name, &inputs, |g, vars| {
                let v = gen.vars_from(vars.to_vec());
                let xv = g.constant(x.clone());
                Ok(composite_loss(g, &gen, &v, xv, &targets, &[&sur], &lt, &dirs, 20.0, 100.0)?.total)
            })
        })
        .collect()
}

/// Every operator check (inputs drawn from `seed`) followed by the composite-objective
/// checks.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    out.extend(composite_suite()?);
    Ok(out)
}
