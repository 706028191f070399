//! Finite-difference verification suite over every registered differentiable
//! operation plus the composed conditioning and denoising graphs.

use std::rc::Rc;

use crate::autodiff::{concat, elementwise, grad_check, ElemOp, Tape, Var};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::Result;
use crate::mda::{MdaConfig, MdaModule};
use crate::rng::RngStream;
use crate::schedule::{ddpm_step_var, NoiseSchedule};
use crate::synthworld::{base_camera, make_trajectory, CameraParams, Density, ObjectCounts, SceneSpec, WorldConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

pub fn suite_passes(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.pass)
}

/// Step size and tolerance appropriate to the working precision.
fn fd_params<T: Real>() -> (f64, f64) {
    match T::DTYPE {
        crate::tensor::Dtype::F64 => (1e-5, 1e-5),
        crate::tensor::Dtype::F32 => (1e-2, 1e-3),
    }
}

type GraphFn<T> = dyn Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>;

fn run_check<T: Real>(
    name: &str,
    f: &GraphFn<T>,
    make_inputs: &dyn Fn(&mut RngStream) -> Vec<Tensor<T>>,
    trials: usize,
    out: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let (step, tol) = fd_params::<T>();
    let mut worst = 0.0f64;
    let mut rng = RngStream::new(0xABCD).derive(name);
    for _ in 0..trials {
        let inputs = make_inputs(&mut rng);
        let rep = grad_check(&|t: &Tape<T>, xs: &[Var<T>]| f(t, xs), &inputs, step, tol)?;
        if rep.max_rel_err > worst {
            worst = rep.max_rel_err;
        }
    }
    out.push(CheckOutcome { name: name.into(), max_rel_err: worst, tol, pass: worst <= tol });
    Ok(())
}

fn randn<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    Tensor::rand_uniform(shape, 0.5, 2.0, rng)
}

fn test_cams(n: usize) -> Vec<CameraParams> {
    let cfg = WorldConfig::default();
    let spec = SceneSpec {
        seed: 12,
        object_counts: ObjectCounts { buildings: 1, vehicles: 1 },
        density: Density::Sparse,
    };
    make_trajectory(&base_camera(&spec, &cfg), n, 0.4)
}

/// Run the whole suite at the given trial count per operation.
pub fn run_gradient_suite<T: Real>(trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // elementwise binary ops through the dispatcher, with broadcasting
    for (op, name) in [
        (ElemOp::Add, "elementwise/add"),
        (ElemOp::Sub, "elementwise/sub"),
        (ElemOp::Mul, "elementwise/mul"),
    ] {
        run_check::<T>(
            name,
            &move |_t, xs| elementwise(op, &xs[0], Some(&xs[1]))?.square()?.mean_all(),
            &|rng| vec![randn(&[3, 4], rng), randn(&[4], rng)],
            trials,
            &mut out,
        )?;
    }
    run_check::<T>(
        "elementwise/div",
        &|_t, xs| elementwise(ElemOp::Div, &xs[0], Some(&xs[1]))?.square()?.mean_all(),
        &|rng| vec![randn(&[3, 4], rng), positive(&[3, 4], rng)],
        trials,
        &mut out,
    )?;
    for (op, name, pos) in [
        (ElemOp::Exp, "elementwise/exp", false),
        (ElemOp::Log, "elementwise/log", true),
        (ElemOp::Sigmoid, "elementwise/sigmoid", false),
        (ElemOp::Sqrt, "elementwise/sqrt", true),
    ] {
        run_check::<T>(
            name,
            &move |_t, xs| elementwise(op, &xs[0], None)?.square()?.mean_all(),
            &move |rng| {
                vec![if pos { positive(&[2, 5], rng) } else { randn(&[2, 5], rng) }]
            },
            trials,
            &mut out,
        )?;
    }

    run_check::<T>(
        "neg_scalar_affine",
        &|_t, xs| xs[0].neg()?.mul_scalar(1.7)?.add_scalar(0.3)?.square()?.mean_all(),
        &|rng| vec![randn(&[6], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "compositions/tanh_silu_softplus",
        &|_t, xs| {
            let a = xs[0].tanh()?;
            let b = xs[0].silu()?;
            let c = xs[0].softplus()?;
            a.add(&b)?.add(&c)?.square()?.mean_all()
        },
        &|rng| vec![randn(&[7], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "matmul",
        &|_t, xs| xs[0].matmul(&xs[1])?.square()?.mean_all(),
        &|rng| vec![randn(&[3, 4], rng), randn(&[4, 2], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "conv1d",
        &|_t, xs| xs[0].conv(&xs[1], &[2], &[1])?.square()?.mean_all(),
        &|rng| vec![randn(&[2, 7], rng), randn(&[3, 2, 3], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "conv2d",
        &|_t, xs| xs[0].conv(&xs[1], &[2, 1], &[1, 1])?.square()?.mean_all(),
        &|rng| vec![randn(&[2, 5, 4], rng), randn(&[3, 2, 3, 3], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "conv3d",
        &|_t, xs| xs[0].conv(&xs[1], &[1, 1, 1], &[1, 0, 1])?.square()?.mean_all(),
        &|rng| vec![randn(&[2, 3, 3, 4], rng), randn(&[2, 2, 2, 2, 2], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "structure/reshape_permute_slice_broadcast",
        &|_t, xs| {
            let r = xs[0].reshape(&[4, 3])?.permute(&[1, 0])?; // [3,4]
            let s = r.slice(1, 1, 2)?; // [3,2]
            let b = s.broadcast_to(&[2, 3, 2])?;
            b.square()?.sum_all()
        },
        &|rng| vec![randn(&[2, 2, 3], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "structure/concat_gather_rows",
        &|_t, xs| {
            let c = concat(&[xs[0].clone(), xs[1].clone()], 0)?; // [5, 3]
            c.gather_rows(&[4, 0, 2, 0])?.square()?.mean_all()
        },
        &|rng| vec![randn(&[2, 3], rng), randn(&[3, 3], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "reduce/sum_axis_mean",
        &|_t, xs| {
            let s = xs[0].sum_axis(1)?;
            s.square()?.mean_all()
        },
        &|rng| vec![randn(&[3, 4, 2], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "softmax",
        &|_t, xs| {
            // weighted sum keeps the output sensitive per lane
            let s = xs[0].softmax(0)?;
            s.mul(&xs[1])?.sum_all()
        },
        &|rng| vec![randn(&[4, 3], rng), randn(&[4, 3], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "log_softmax",
        &|_t, xs| {
            let s = xs[0].log_softmax(1)?;
            s.mul(&xs[1])?.sum_all()
        },
        &|rng| vec![randn(&[3, 5], rng), randn(&[3, 5], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "resize/nearest3d",
        &|_t, xs| xs[0].resize_nearest(&[4, 6, 2])?.square()?.mean_all(),
        &|rng| vec![randn(&[2, 2, 3, 2], rng)],
        trials,
        &mut out,
    )?;
    run_check::<T>(
        "resize/bilinear",
        &|_t, xs| xs[0].resize_bilinear(5, 3)?.square()?.mean_all(),
        &|rng| vec![randn(&[2, 3, 4], rng)],
        trials,
        &mut out,
    )?;

    run_check::<T>(
        "trilinear_gather",
        &|_t, xs| xs[0].trilinear_gather(&xs[1], &xs[2])?.square()?.mean_all(),
        &|rng| {
            // fractional in-range displacements, away from lattice points
            let disp = Tensor::rand_uniform(&[6, 3, 3, 3], 0.21, 0.79, rng);
            vec![randn(&[2, 3, 3, 3], rng), disp, positive(&[2, 3, 3, 3], rng)]
        },
        trials,
        &mut out,
    )?;

    // reverse-update step is differentiable with z = 0
    let sched = NoiseSchedule::linear(10, 1e-3, 0.05)?;
    run_check::<T>(
        "ddpm_step",
        &move |_t, xs| ddpm_step_var(&xs[0], &xs[1], 4, &sched)?.square()?.mean_all(),
        &|rng| vec![randn(&[3, 4], rng), randn(&[3, 4], rng)],
        trials,
        &mut out,
    )?;

    composed_mda_check::<T>(trials.min(4), &mut out)?;
    composed_denoiser_check::<T>(trials.min(4), &mut out)?;
    Ok(out)
}

/// Full conditioning module composed to a scalar loss; checks gradients
/// through the inputs plus representative parameter tensors.
fn composed_mda_check<T: Real>(trials: usize, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = RngStream::new(314);
    let cfg = MdaConfig {
        patch: 2,
        d_model: 6,
        state_dim: 3,
        occ_channels: 3,
        kw: 2,
        ..Default::default()
    };
    let module = Rc::new(MdaModule::<T>::init(cfg, 2, 4, [4, 4], 4, 3, &mut rng)?);
    let cams = test_cams(2);
    // make the fusion visible to the loss: nonzero fusion conv
    let m2 = {
        let mut m = MdaModule::<T>::init(cfg, 2, 4, [4, 4], 4, 3, &mut rng)?;
        m.params.set("zero_conv/w", Tensor::randn(&[4, 4, 1, 1, 1], 0.3, &mut rng))?;
        Rc::new(m)
    };
    let _ = module;
    let mc = m2.clone();
    let f = move |tape: &Tape<T>, xs: &[Var<T>]| {
        let mut vars = mc.params.lift(tape, false);
        vars.insert("ssm/log_delta", xs[2].clone());
        vars.insert("zero_conv/w", xs[3].clone());
        let fused = mc.forward(&vars, &xs[0], &xs[1], &cams)?;
        fused.square()?.mean_all()
    };
    run_check::<T>(
        "composed/mda_forward",
        &f,
        &{
            let m = m2.clone();
            move |rng: &mut RngStream| {
                vec![
                    Tensor::randn(&[4, 2, 4, 4], 0.5, rng),
                    Tensor::randn(&[4, 3, 4, 4], 0.5, rng),
                    m.params.get("ssm/log_delta").unwrap().clone(),
                    Tensor::randn(&[4, 4, 1, 1, 1], 0.3, rng),
                ]
            }
        },
        trials,
        out,
    )
}

/// Denoiser composed with a mean-squared loss on a micro input.
fn composed_denoiser_check<T: Real>(trials: usize, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = RngStream::new(159);
    let cfg = DenoiserConfig {
        image_hw: [8, 8],
        widths: [3, 4, 6],
        t_emb_dim: 6,
        cond_dim: 6,
        token_dim: 4,
        vocab: 256,
    };
    let mda_cfg = MdaConfig {
        patch: 2,
        d_model: 6,
        state_dim: 3,
        occ_channels: 3,
        kw: 2,
        ..Default::default()
    };
    let mut net = DenoiserNet::<T>::init(cfg, Some(mda_cfg), 1, 4, 3, &mut rng)?;
    // nonzero output conv so every path reaches the loss
    net.params.set("out/w", Tensor::randn(&[3, 3, 3, 3], 0.2, &mut rng))?;
    let net = Rc::new(net);
    let cams = test_cams(1);
    let nc = net.clone();
    let f = move |tape: &Tape<T>, xs: &[Var<T>]| {
        let mut vars = nc.lift(tape, false);
        vars.net.insert("out/b", xs[2].clone());
        if let Some(mv) = vars.mda.as_mut() {
            mv.insert("zero_conv/w", xs[3].clone());
        }
        let outs = nc.forward(&vars, &[xs[0].clone()], 3, &[1, 2], Some(&xs[1]), &cams)?;
        // mean squared against the input noise stand-in
        outs[0].sub(&xs[0])?.square()?.mean_all()
    };
    run_check::<T>(
        "composed/predict_noise",
        &f,
        &|rng: &mut RngStream| {
            vec![
                Tensor::randn(&[3, 8, 8], 0.5, rng),
                Tensor::randn(&[4, 3, 4, 4], 0.5, rng),
                Tensor::randn(&[3, 1, 1], 0.1, rng),
                Tensor::randn(&[6, 6, 1, 1, 1], 0.2, rng),
            ]
        },
        trials,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_suite_passes_at_tight_tolerance() {
        let outcomes = run_gradient_suite::<f64>(3).unwrap();
        for o in &outcomes {
            assert!(o.pass, "{}: {} > {}", o.name, o.max_rel_err, o.tol);
        }
        assert!(outcomes.len() >= 20, "suite covers the registered ops");
    }

    #[test]
    fn f32_suite_passes_at_loose_tolerance() {
        let outcomes = run_gradient_suite::<f32>(2).unwrap();
        for o in &outcomes {
            assert!(o.pass, "{}: {} > {}", o.name, o.max_rel_err, o.tol);
        }
    }
}
