//! Analytic cost accounting.
//!
//! Every executed component is charged an exact integer FLOP count
//! derived from its layer dimensions — no profiling, no rounding. The
//! cost table:
//!
//! | kind                      | dims                          | FLOPs                                |
//! |---------------------------|-------------------------------|--------------------------------------|
//! | `conv`                    | `[k, cin, cout, ho, wo, bias]`| `2k²·cin·cout·ho·wo (+ cout·ho·wo)`  |
//! | `relu`, `add`, `sub`, `mul`, `scale`, `abs`, `scale_per_sample` | `[elems]` | `elems`  |
//! | `sigmoid`, `tanh`         | `[elems]`                     | `4·elems`                            |
//! | `global_avg_pool`         | `[c, hw]`                     | `c·(hw + 1)`                         |
//! | `corr_volume`             | `[c, hw]`                     | `(2c + 1)·hw²`                       |
//! | `corr_lookup`             | `[window, hw]`                | `16·window²·hw`                      |
//! | `gru_mix`                 | `[elems]`                     | `18·elems`                           |
//! | `gate`                    | `[samples]`                   | `8·samples`                          |
//! | `concat`, `slice`, `reshape` | `[]`                       | `0`                                  |
//!
//! `gru_mix` covers the recurrent cell's three activations (12) and six
//! combination ops (r∘h, −z, 1+·, (1−z)∘h, z∘q, +) per hidden element;
//! its convolutions are charged separately. All ledger figures are per
//! sample; a trace total is
//! `encoder + entered_updates·update + policy_calls·policy`. The gate's
//! training-time noise perturbation (2 FLOPs per sample) is excluded:
//! the ledger prices the inference path. The test suite cross-checks
//! these walks against an independent meter over the actually executed
//! operation tape ([`crate::graph::Graph::tape_flops`]).

use crate::error::{Error, Result};
use crate::flownet::ModelConfig;
use crate::kernels::conv_out_len;

/// Cost of one layer from its kind and dimensions (table in the module
/// docs). Unknown kinds and wrong dimension counts are contract errors.
pub fn layer_flops(kind: &str, dims: &[u64]) -> Result<u64> {
    let want = |n: usize| -> Result<()> {
        if dims.len() == n {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "layer_flops: kind '{kind}' takes {n} dims, got {}",
                dims.len()
            )))
        }
    };
    match kind {
        "conv" => {
            want(6)?;
            let [k, cin, cout, ho, wo, bias] = [dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]];
            if bias > 1 {
                return Err(Error::contract("layer_flops: conv bias flag must be 0 or 1"));
            }
            let mac = 2u64
                .checked_mul(k * k)
                .and_then(|v| v.checked_mul(cin))
                .and_then(|v| v.checked_mul(cout))
                .and_then(|v| v.checked_mul(ho))
                .and_then(|v| v.checked_mul(wo))
                .ok_or_else(|| Error::contract("layer_flops: conv cost overflows u64"))?;
            Ok(mac + bias * cout * ho * wo)
        }
        "relu" | "add" | "sub" | "mul" | "scale" | "abs" | "scale_per_sample" => {
            want(1)?;
            Ok(dims[0])
        }
        "sigmoid" | "tanh" => {
            want(1)?;
            Ok(4 * dims[0])
        }
        "global_avg_pool" => {
            want(2)?;
            Ok(dims[0] * (dims[1] + 1))
        }
        "corr_volume" => {
            want(2)?;
            let (c, hw) = (dims[0], dims[1]);
            hw.checked_mul(hw)
                .and_then(|sq| sq.checked_mul(2 * c + 1))
                .ok_or_else(|| Error::contract("layer_flops: corr_volume cost overflows u64"))
        }
        "corr_lookup" => {
            want(2)?;
            Ok(16 * dims[0] * dims[0] * dims[1])
        }
        "gru_mix" => {
            want(1)?;
            Ok(18 * dims[0])
        }
        "gate" => {
            want(1)?;
            Ok(8 * dims[0])
        }
        "concat" | "slice" | "reshape" => {
            want(0)?;
            Ok(0)
        }
        other => Err(Error::contract(format!(
            "layer_flops: unknown layer kind '{other}'"
        ))),
    }
}

/// Per-sample component costs for one model geometry.
#[derive(Debug, Clone, Copy)]
pub struct FlopsLedger {
    encoder: u64,
    update: u64,
    policy: u64,
}

impl FlopsLedger {
    /// Walks the architecture at the given image extent. The extent must
    /// satisfy the encoder's divisibility contract.
    pub fn new(cfg: &ModelConfig, image_h: usize, image_w: usize) -> Result<FlopsLedger> {
        cfg.validate()?;
        let div = 2 * cfg.scale;
        if image_h % div != 0 || image_w % div != 0 {
            return Err(Error::contract(format!(
                "FlopsLedger: image extent {image_h}x{image_w} must be divisible by {div}"
            )));
        }
        let h = conv_out_len(image_h, 3, cfg.scale, 1) as u64;
        let w = conv_out_len(image_w, 3, cfg.scale, 1) as u64;
        let hw = h * w;
        let (ci, cf, cm, ch) = (cfg.ci as u64, cfg.cf as u64, cfg.cm as u64, cfg.ch as u64);
        let mid = cfg.stem_mid() as u64;
        let conv3 = |cin: u64, cout: u64| layer_flops("conv", &[3, cin, cout, h, w, 1]);

        let stem = conv3(ci, mid)? + layer_flops("relu", &[mid * hw])? + conv3(mid, cf)?;
        let ctx = conv3(2 * ci, mid)?
            + layer_flops("relu", &[mid * hw])?
            + conv3(mid, cf)?
            + layer_flops("tanh", &[cf * hw])?;
        let encoder = 2 * stem + layer_flops("corr_volume", &[cf, hw])? + ctx;

        let win = cfg.window_side() as u64;
        let gru_in = (cfg.cf + cfg.gru_x()) as u64;
        let update = layer_flops("corr_lookup", &[win, hw])?
            + conv3(cfg.motion_in() as u64, cm)?
            + layer_flops("relu", &[cm * hw])?
            + conv3(cm, cm)?
            + layer_flops("relu", &[cm * hw])?
            + 3 * conv3(gru_in, cf)?
            + layer_flops("gru_mix", &[cf * hw])?
            + conv3(cf, cf)?
            + layer_flops("relu", &[cf * hw])?
            + conv3(cf, 2)?
            + layer_flops("add", &[2 * hw])?;

        let policy = conv3(cfg.policy_in() as u64, ch)?
            + layer_flops("scale_per_sample", &[ch * hw])?
            + layer_flops("relu", &[ch * hw])?
            + layer_flops("global_avg_pool", &[ch, hw])?
            + layer_flops("conv", &[1, ch, 3, 1, 1, 1])?
            + layer_flops("gate", &[1])?;

        Ok(FlopsLedger {
            encoder,
            update,
            policy,
        })
    }

    /// One encoder pass (feature stems, correlation volume, context).
    pub fn encoder(&self) -> u64 {
        self.encoder
    }

    /// One executed refinement iteration.
    pub fn update(&self) -> u64 {
        self.update
    }

    /// One gate invocation (noise-free path).
    pub fn policy(&self) -> u64 {
        self.policy
    }

    /// Component lookup by name; unknown names are contract errors.
    pub fn component(&self, name: &str) -> Result<u64> {
        match name {
            "encoder" => Ok(self.encoder),
            "update" => Ok(self.update),
            "policy" => Ok(self.policy),
            other => Err(Error::contract(format!(
                "FlopsLedger: unknown component '{other}'"
            ))),
        }
    }

    /// Per-sample total for a trace that entered `updates` refinement
    /// iterations and invoked the gate `policy_calls` times.
    pub fn trace_total(&self, updates: u64, policy_calls: u64) -> u64 {
        self.encoder + updates * self.update + policy_calls * self.policy
    }
}
