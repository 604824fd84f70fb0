//! Checkpoint file: a magic line, one `meta` line of JSON (step, config,
//! class means, mixture, decision rule, optimizer coefficients), then the
//! parameters, the velocity and the EMA shadow as `section <name>` blocks in
//! the parameter text format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use super::trainer::TrainState;
use crate::betamix::BetaMixtureModel;
use crate::decide::DecisionRule;
use crate::error::{Error, Result};
use crate::nn::{read_params_lines, write_params};
use crate::optim::OptimizerState;
use crate::subspace::ClassMeanTable;

pub const CHECKPOINT_MAGIC: &str = "# osslab-checkpoint v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    step: usize,
    config: TrainingConfig,
    means: ClassMeanTable,
    mixture: BetaMixtureModel,
    rule: DecisionRule,
    sgd_momentum: f64,
    ema_momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub state: TrainState,
}

pub fn write_checkpoint<W: Write>(config: &TrainingConfig, state: &TrainState, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let meta = Meta {
        step: state.step,
        config: config.clone(),
        means: state.means.clone(),
        mixture: state.mixture,
        rule: state.rule,
        sgd_momentum: state.optim.momentum,
        ema_momentum: state.optim.ema_momentum,
    };
    writeln!(w, "meta {}", serde_json::to_string(&meta)?)?;
    for (name, p) in [
        ("params", &state.params),
        ("velocity", &state.optim.velocity),
        ("ema", &state.optim.ema_params),
    ] {
        writeln!(w, "section {name}")?;
        write_params(p, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(config: &TrainingConfig, state: &TrainState, path: &Path) -> Result<()> {
    write_checkpoint(config, state, std::fs::File::create(path)?)
}

pub fn read_checkpoint<R: std::io::Read>(r: R, origin: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut lines = BufReader::new(r).lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(fail(format!(
            "expected '{CHECKPOINT_MAGIC}', found '{magic}'"
        )));
    }
    let meta_line = lines.next().transpose()?.unwrap_or_default();
    let json = meta_line
        .strip_prefix("meta ")
        .ok_or_else(|| fail("missing meta line".into()))?;
    let meta: Meta = serde_json::from_str(json).map_err(|e| fail(format!("meta: {e}")))?;
    let mut blocks = Vec::new();
    for name in ["params", "velocity", "ema"] {
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != format!("section {name}") {
            return Err(fail(format!("expected 'section {name}', found '{header}'")));
        }
        blocks.push(read_params_lines(&mut lines, origin)?);
    }
    let ema_params = blocks.pop().expect("three blocks");
    let velocity = blocks.pop().expect("three blocks");
    let params = blocks.pop().expect("three blocks");
    if !params.same_shape(&velocity) || !params.same_shape(&ema_params) {
        return Err(fail("parameter sections disagree in shape".into()));
    }
    if params.arch() != &meta.config.architecture() {
        return Err(fail(
            "parameters do not match the stored configuration".into(),
        ));
    }
    let optim = OptimizerState {
        velocity,
        momentum: meta.sgd_momentum,
        ema_params,
        ema_momentum: meta.ema_momentum,
    };
    let state = TrainState {
        step: meta.step,
        params,
        optim,
        means: meta.means,
        mixture: meta.mixture,
        rule: meta.rule,
    };
    Ok(Checkpoint {
        config: meta.config,
        state,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::fs::File::open(path)?, path)
}
