//! Finite-difference validation suite: every differentiable operation plus
//! the full toy network, all in f64, compared against the central-difference
//! oracle at 1e-4 maximum relative error.
//!
//! Shared by the `gradcheck` CLI command and the acceptance tests. Setting
//! MAXSR_GRADCHECK_CORRUPT=1 perturbs one analytic gradient, which must make
//! the suite fail; that negative control guards the harness itself.

use crate::attention::{
    adaptive_block_attention, adaptive_grid_attention, multihead_self_attention, AttentionParams,
    RpeTable,
};
use crate::blocks::ForwardMode;
use crate::error::Result;
use crate::geometry::{adaptive_footage, pad_for_plan, window_partition, window_reverse, AttentionMode};
use crate::model::{build_model, forward, ModelConfig};
use crate::rng::Rng;
use crate::tensor::ops::{batched_matmul, batch_norm_train, conv2d, depthwise_conv2d};
use crate::tensor::{finite_diff_grad, max_rel_error, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

/// Result of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

struct Suite {
    corrupt: bool,
    results: Vec<CheckResult>,
}

/// Random values bounded away from zero, for ops with a kink there.
fn kink_safe(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(0.05, 1.0);
            if rng.below(2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

impl Suite {
    /// Check d(f)/d(x) at `x` for a scalar-valued f, by backward vs central
    /// differences.
    fn check<F>(&mut self, name: &str, x: Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    {
        let param = Tensor::param(x.data().to_vec(), x.shape())?;
        let loss = f(&param)?;
        loss.backward()?;
        let mut analytic = param.grad().expect("gradient populated");
        if self.corrupt && self.results.is_empty() {
            // negative control: break the first analytic gradient
            if let Some(v) = analytic.first_mut() {
                *v += 1.0;
            }
        }
        let numeric = finite_diff_grad(&f, &param.detach(), FD_EPS)?;
        let err = max_rel_error(&analytic, &numeric);
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            pass: err < GRADCHECK_TOLERANCE,
        });
        Ok(())
    }

    /// The negative control only needs to demonstrate a caught failure.
    fn corrupt_done(&self) -> bool {
        self.corrupt && self.results.iter().any(|r| !r.pass)
    }
}

/// Run the whole suite. Deterministic under `seed`.
pub fn run_suite(seed: u64, corrupt: bool) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut s = Suite { corrupt, results: Vec::new() };

    // -- elementwise and reductions ------------------------------------
    let v = uniform(&mut rng, 24, -1.0, 1.0);
    let other = Tensor::from_vec(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 2, 2])?;
    s.check("add", Tensor::from_vec(v.clone(), &[2, 3, 2, 2])?, |x| x.add(&other)?.mean_all())?;
    if s.corrupt_done() {
        return Ok(s.results);
    }
    let other2 = other.clone();
    s.check("sub", Tensor::from_vec(v.clone(), &[2, 3, 2, 2])?, |x| other2.sub(x)?.mean_all())?;
    let other3 = other.clone();
    s.check("mul", Tensor::from_vec(v.clone(), &[2, 3, 2, 2])?, |x| x.mul(&other3)?.mean_all())?;
    s.check("scale", Tensor::from_vec(v.clone(), &[24])?, |x| x.scale(-1.7)?.mean_all())?;
    s.check("gelu", Tensor::from_vec(uniform(&mut rng, 16, -2.0, 2.0), &[16])?, |x| x.gelu()?.mean_all())?;
    s.check("sigmoid", Tensor::from_vec(uniform(&mut rng, 16, -3.0, 3.0), &[16])?, |x| {
        x.sigmoid()?.mean_all()
    })?;
    s.check("relu", Tensor::from_vec(kink_safe(&mut rng, 16), &[16])?, |x| x.relu()?.mean_all())?;
    s.check("abs", Tensor::from_vec(kink_safe(&mut rng, 16), &[16])?, |x| x.abs_val()?.mean_all())?;
    s.check("sum_all", Tensor::from_vec(uniform(&mut rng, 12, -1.0, 1.0), &[12])?, |x| x.sum_all())?;
    s.check("mean_all", Tensor::from_vec(uniform(&mut rng, 12, -1.0, 1.0), &[12])?, |x| x.mean_all())?;
    s.check("softmax_lastdim", Tensor::from_vec(uniform(&mut rng, 12, -2.0, 2.0), &[3, 4])?, |x| {
        // weighted sum makes the gradient non-trivial across the row
        let w = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 4])?;
        x.softmax_lastdim()?.mul(&w)?.mean_all()
    })?;

    let gamma = Tensor::from_vec(uniform(&mut rng, 3, 0.5, 1.5), &[3])?;
    let beta = Tensor::from_vec(uniform(&mut rng, 3, -0.5, 0.5), &[3])?;
    s.check("layer_norm.x", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2])?, |x| {
        x.layer_norm(&gamma, &beta, 1e-5)?.mean_all()
    })?;
    let xfix = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2])?;
    let beta2 = beta.clone();
    s.check("layer_norm.gamma", Tensor::from_vec(uniform(&mut rng, 3, 0.5, 1.5), &[3])?, |g| {
        xfix.layer_norm(g, &beta2, 1e-5)?.mean_all()
    })?;

    s.check("pixel_shuffle", Tensor::from_vec(uniform(&mut rng, 8 * 2 * 2, -1.0, 1.0), &[1, 8, 2, 2])?, |x| {
        let w = Tensor::from_vec((0..2 * 4 * 4).map(|i| (i as f64 * 0.21).cos()).collect(), &[1, 2, 4, 4])?;
        x.pixel_shuffle(2)?.mul(&w)?.mean_all()
    })?;
    s.check("global_avg_pool", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 9, -1.0, 1.0), &[2, 3, 3, 3])?, |x| {
        let w = Tensor::from_vec((0..6).map(|i| 0.3 + i as f64).collect(), &[2, 3, 1, 1])?;
        x.global_avg_pool()?.mul(&w)?.mean_all()
    })?;
    let bias_v = Tensor::from_vec(uniform(&mut rng, 4, -0.5, 0.5), &[4])?;
    s.check("add_bias.x", Tensor::from_vec(uniform(&mut rng, 3 * 4, -1.0, 1.0), &[3, 4])?, |x| {
        x.add_bias(&bias_v)?.mean_all()
    })?;
    let xb = Tensor::from_vec(uniform(&mut rng, 3 * 4, -1.0, 1.0), &[3, 4])?;
    s.check("add_bias.bias", Tensor::from_vec(uniform(&mut rng, 4, -0.5, 0.5), &[4])?, |b| {
        xb.add_bias(b)?.mean_all()
    })?;
    let gate = Tensor::from_vec(uniform(&mut rng, 2 * 3, 0.1, 0.9), &[2, 3, 1, 1])?;
    s.check("scale_channels.x", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2])?, |x| {
        x.scale_channels(&gate)?.mean_all()
    })?;
    let xg = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2])?;
    s.check("scale_channels.gate", Tensor::from_vec(uniform(&mut rng, 2 * 3, 0.1, 0.9), &[2, 3, 1, 1])?, |g| {
        xg.scale_channels(g)?.mean_all()
    })?;
    let parts = Tensor::from_vec(uniform(&mut rng, 2 * 4, -1.0, 1.0), &[1, 2, 2, 2])?;
    s.check("concat_channels", Tensor::from_vec(uniform(&mut rng, 3 * 4, -1.0, 1.0), &[1, 3, 2, 2])?, |x| {
        let w = Tensor::from_vec((0..5 * 4).map(|i| (i as f64 * 0.13).sin()).collect(), &[1, 5, 2, 2])?;
        Tensor::concat_channels(&[x, &parts])?.mul(&w)?.mean_all()
    })?;
    s.check("reshape_permute", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 4])?, |x| {
        let w = Tensor::from_vec((0..24).map(|i| (i as f64 * 0.19).cos()).collect(), &[4, 3, 2])?;
        x.permute(&[2, 1, 0])?.mul(&w)?.mean_all()
    })?;
    s.check("slice_lastdim", Tensor::from_vec(uniform(&mut rng, 3 * 6, -1.0, 1.0), &[3, 6])?, |x| {
        x.slice_lastdim(1, 3)?.mean_all()
    })?;

    // -- matmul / conv ---------------------------------------------------
    let b_mat = Tensor::from_vec(uniform(&mut rng, 2 * 4 * 3, -1.0, 1.0), &[2, 4, 3])?;
    s.check("batched_matmul.a", Tensor::from_vec(uniform(&mut rng, 2 * 2 * 4, -1.0, 1.0), &[2, 2, 4])?, |a| {
        batched_matmul(a, &b_mat)?.mean_all()
    })?;
    let a_mat = Tensor::from_vec(uniform(&mut rng, 2 * 2 * 4, -1.0, 1.0), &[2, 2, 4])?;
    s.check("batched_matmul.b", Tensor::from_vec(uniform(&mut rng, 2 * 4 * 3, -1.0, 1.0), &[2, 4, 3])?, |b| {
        batched_matmul(&a_mat, b)?.mean_all()
    })?;

    let cw = Tensor::from_vec(uniform(&mut rng, 4 * 3 * 9, -0.4, 0.4), &[4, 3, 3, 3])?;
    let cb = Tensor::from_vec(uniform(&mut rng, 4, -0.2, 0.2), &[4])?;
    s.check("conv2d.input", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 25, -1.0, 1.0), &[2, 3, 5, 5])?, |x| {
        conv2d(x, &cw, Some(&cb), 1, 1)?.mean_all()
    })?;
    let cx = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 25, -1.0, 1.0), &[2, 3, 5, 5])?;
    let cb2 = cb.clone();
    s.check("conv2d.weight", Tensor::from_vec(uniform(&mut rng, 4 * 3 * 9, -0.4, 0.4), &[4, 3, 3, 3])?, |w| {
        conv2d(&cx, w, Some(&cb2), 1, 1)?.mean_all()
    })?;
    let cw2 = cw.clone();
    s.check("conv2d.bias", Tensor::from_vec(uniform(&mut rng, 4, -0.2, 0.2), &[4])?, |b| {
        conv2d(&cx, &cw2, Some(b), 1, 1)?.mean_all()
    })?;
    s.check("conv2d.strided", Tensor::from_vec(uniform(&mut rng, 2 * 49, -1.0, 1.0), &[1, 2, 7, 7])?, |x| {
        conv2d(x, &Tensor::from_vec(vec![0.2; 2 * 2 * 9], &[2, 2, 3, 3])?, None, 2, 1)?.mean_all()
    })?;

    let dw_w = Tensor::from_vec(uniform(&mut rng, 3 * 9, -0.4, 0.4), &[3, 1, 3, 3])?;
    s.check("depthwise.input", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 16, -1.0, 1.0), &[2, 3, 4, 4])?, |x| {
        depthwise_conv2d(x, &dw_w, None, 1, 1)?.mean_all()
    })?;
    let dx = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 16, -1.0, 1.0), &[2, 3, 4, 4])?;
    s.check("depthwise.weight", Tensor::from_vec(uniform(&mut rng, 3 * 9, -0.4, 0.4), &[3, 1, 3, 3])?, |w| {
        depthwise_conv2d(&dx, w, None, 1, 1)?.mean_all()
    })?;

    let bn_g = Tensor::from_vec(uniform(&mut rng, 3, 0.5, 1.5), &[3])?;
    let bn_b = Tensor::from_vec(uniform(&mut rng, 3, -0.5, 0.5), &[3])?;
    s.check("batch_norm.x", Tensor::from_vec(uniform(&mut rng, 2 * 3 * 9, -1.0, 1.0), &[2, 3, 3, 3])?, |x| {
        let w = Tensor::from_vec((0..2 * 3 * 9).map(|i| (i as f64 * 0.23).sin()).collect(), &[2, 3, 3, 3])?;
        batch_norm_train(x, &bn_g, &bn_b, 1e-5)?.0.mul(&w)?.mean_all()
    })?;

    // -- geometry (gather paths) ----------------------------------------
    s.check("pad_partition_reverse", Tensor::from_vec(uniform(&mut rng, 2 * 15, -1.0, 1.0), &[1, 2, 3, 5])?, |x| {
        let plan = adaptive_footage(3, 5, AttentionMode::AdaptiveExact)?;
        let p = pad_for_plan(x, &plan)?;
        let t = window_partition(&p, &plan)?;
        let w = Tensor::from_vec(
            (0..t.numel()).map(|i| (i as f64 * 0.17).cos()).collect(),
            t.shape(),
        )?;
        window_reverse(&t.mul(&w)?, &plan)?.mean_all()
    })?;

    // -- attention --------------------------------------------------------
    let width = 4;
    let heads = 2;
    let mk_attn = |rng: &mut Rng, rpe: Option<RpeTable<f64>>| -> Result<AttentionParams<f64>> {
        Ok(AttentionParams {
            heads,
            qkv_weight: Tensor::from_vec(uniform(rng, width * 3 * width, -0.4, 0.4), &[width, 3 * width])?,
            qkv_bias: Tensor::from_vec(uniform(rng, 3 * width, -0.1, 0.1), &[3 * width])?,
            out_weight: Tensor::from_vec(uniform(rng, width * width, -0.4, 0.4), &[width, width])?,
            out_bias: Tensor::from_vec(uniform(rng, width, -0.1, 0.1), &[width])?,
            rpe,
        })
    };

    let attn_p = mk_attn(&mut rng, None)?;
    s.check("mhsa.tokens", Tensor::from_vec(uniform(&mut rng, 2 * 3 * width, -1.0, 1.0), &[2, 3, width])?, |t| {
        multihead_self_attention(t, &attn_p, None, None)?.mean_all()
    })?;
    let toks = Tensor::from_vec(uniform(&mut rng, 2 * 3 * width, -1.0, 1.0), &[2, 3, width])?;
    let attn_q = mk_attn(&mut rng, None)?;
    s.check(
        "mhsa.qkv_weight",
        Tensor::from_vec(uniform(&mut rng, width * 3 * width, -0.4, 0.4), &[width, 3 * width])?,
        |w| {
            let p = AttentionParams {
                heads,
                qkv_weight: w.clone(),
                qkv_bias: attn_q.qkv_bias.clone(),
                out_weight: attn_q.out_weight.clone(),
                out_bias: attn_q.out_bias.clone(),
                rpe: None,
            };
            multihead_self_attention(&toks, &p, None, None)?.mean_all()
        },
    )?;

    let block_p = mk_attn(&mut rng, None)?;
    s.check(
        "adaptive_block_attention",
        Tensor::from_vec(uniform(&mut rng, width * 25, -1.0, 1.0), &[1, width, 5, 5])?,
        |x| adaptive_block_attention(x, &block_p, AttentionMode::AdaptiveExact, false)?.mean_all(),
    )?;
    let grid_p = mk_attn(&mut rng, None)?;
    s.check(
        "adaptive_grid_attention",
        Tensor::from_vec(uniform(&mut rng, width * 25, -1.0, 1.0), &[1, width, 5, 5])?,
        |x| adaptive_grid_attention(x, &grid_p, AttentionMode::AdaptiveExact, false)?.mean_all(),
    )?;
    let masked_p = mk_attn(&mut rng, None)?;
    s.check(
        "adaptive_block_attention.masked",
        Tensor::from_vec(uniform(&mut rng, width * 15, -1.0, 1.0), &[1, width, 3, 5])?,
        |x| adaptive_block_attention(x, &masked_p, AttentionMode::AdaptiveExact, true)?.mean_all(),
    )?;
    // relative-position table gradient (table at the live footage)
    let plan = adaptive_footage(5, 5, AttentionMode::AdaptiveExact)?;
    let rpe_len = (2 * plan.win_h - 1) * (2 * plan.win_w - 1);
    let rpe_base = mk_attn(&mut rng, None)?;
    let rpe_x = Tensor::from_vec(uniform(&mut rng, width * 25, -1.0, 1.0), &[1, width, 5, 5])?;
    s.check("rpe.table", Tensor::from_vec(uniform(&mut rng, heads * rpe_len, -0.3, 0.3), &[heads, rpe_len])?, |t| {
        let p = AttentionParams {
            heads,
            qkv_weight: rpe_base.qkv_weight.clone(),
            qkv_bias: rpe_base.qkv_bias.clone(),
            out_weight: rpe_base.out_weight.clone(),
            out_bias: rpe_base.out_bias.clone(),
            rpe: Some(RpeTable { table: t.clone(), base_h: plan.win_h, base_w: plan.win_w }),
        };
        adaptive_block_attention(&rpe_x, &p, AttentionMode::AdaptiveExact, false)?.mean_all()
    })?;

    // -- full toy network -------------------------------------------------
    // width 4, 2 blocks in 2 stages, 2 heads, 8x8 input, x2; the input
    // gradient exercises every layer in train mode (batch-norm statistics
    // included). A squared-mean readout keeps the objective smooth.
    let toy = ModelConfig {
        blocks: 2,
        stages: 2,
        width: 4,
        heads: 2,
        scale: 2,
        attention_mode: AttentionMode::AdaptiveExact,
        rpe: false,
        mask_padding: false,
    };
    let mut state = build_model::<f64>(&toy, seed ^ 0x5eed)?;
    let readout = Tensor::from_vec(
        (0..3 * 16 * 16).map(|i| (i as f64 * 0.03).sin()).collect(),
        &[1, 3, 16, 16],
    )?;
    s.check(
        "network.input",
        Tensor::from_vec(uniform(&mut rng, 3 * 64, 0.0, 1.0), &[1, 3, 8, 8])?,
        |x| forward(&state, &toy, x, ForwardMode::Train)?.mul(&readout)?.mean_all(),
    )?;

    // Every parameter of the toy network: one backward supplies all analytic
    // gradients, then central differences probe each coordinate by swapping
    // a perturbed tensor into the state.
    let x_net = Tensor::from_vec(uniform(&mut rng, 3 * 64, 0.0, 1.0), &[1, 3, 8, 8])?;
    state.zero_grads();
    let loss = forward(&state, &toy, &x_net, ForwardMode::Train)?.mul(&readout)?.mean_all()?;
    loss.backward()?;
    // (name, analytic grad, shape, baseline values)
    type ParamEntry = (String, Vec<f64>, Vec<usize>, Vec<f64>);
    let mut entries: Vec<ParamEntry> = Vec::new();
    state.visit_params(&mut |n, t| {
        entries.push((n, t.grad().expect("gradient populated"), t.shape().to_vec(), t.data().to_vec()));
    });

    let set_param = |state: &mut crate::model::ModelState<f64>, name: &str, data: Vec<f64>, shape: &[usize]| {
        let replacement = Tensor::param(data, shape).expect("same shape");
        state.visit_params_mut(&mut |n, t| {
            if n == name {
                *t = replacement.clone();
            }
        });
    };

    for (name, analytic, shape, base_data) in entries {
        let mut numeric = vec![0.0f64; base_data.len()];
        for i in 0..base_data.len() {
            let mut plus = base_data.clone();
            plus[i] += FD_EPS;
            set_param(&mut state, &name, plus, &shape);
            let fp = crate::tensor::no_grad(|| -> Result<f64> {
                forward(&state, &toy, &x_net, ForwardMode::Train)?.mul(&readout)?.mean_all()?.item()
            })?;
            let mut minus = base_data.clone();
            minus[i] -= FD_EPS;
            set_param(&mut state, &name, minus, &shape);
            let fm = crate::tensor::no_grad(|| -> Result<f64> {
                forward(&state, &toy, &x_net, ForwardMode::Train)?.mul(&readout)?.mean_all()?.item()
            })?;
            numeric[i] = (fp - fm) / (2.0 * FD_EPS);
        }
        set_param(&mut state, &name, base_data, &shape);
        let err = max_rel_error(&analytic, &numeric);
        s.results.push(CheckResult {
            name: format!("network.{name}"),
            max_rel_error: err,
            pass: err < GRADCHECK_TOLERANCE,
        });
    }

    Ok(s.results)
}
