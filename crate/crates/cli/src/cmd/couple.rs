//! `chartwit couple`: behavioural coupling statistics for one positive /
//! negative score split.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use chartwit_core::{
    axis_scores, condition_groups, couple, ActivationTable, ConditionAliasMap, DatasetManifest,
    Result,
};

use crate::envelope::{read_candidate, read_json, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct CoupleArgs {
    /// JSON score file {"pos": [...], "neg": [...]}; bypasses the table path.
    #[arg(long, conflicts_with_all = ["acts", "meta", "aliases", "candidate"])]
    pub scores: Option<PathBuf>,
    /// Activation table scored along the frozen axis.
    #[arg(long, required_unless_present = "scores")]
    pub acts: Option<PathBuf>,
    #[arg(long, required_unless_present = "scores")]
    pub meta: Option<PathBuf>,
    /// Alias map splitting rows into informative and null conditions.
    #[arg(long, required_unless_present = "scores")]
    pub aliases: Option<PathBuf>,
    /// Search report, freeze manifest, or bare candidate (chart plus axis).
    #[arg(long, required_unless_present = "scores")]
    pub candidate: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ScoreFile {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

pub fn run(ctx: &Ctx, args: &CoupleArgs) -> Result<u8> {
    let (pos, neg, input_paths) = match &args.scores {
        Some(path) => {
            let file: ScoreFile = read_json(path)?;
            (file.pos, file.neg, vec![path.clone()])
        }
        None => {
            let acts = args.acts.clone().expect("clap enforces --acts");
            let meta = args.meta.clone().expect("clap enforces --meta");
            let aliases_path = args.aliases.clone().expect("clap enforces --aliases");
            let cand_path = args.candidate.clone().expect("clap enforces --candidate");
            let table = ActivationTable::read(&acts, &meta)?;
            let aliases = ConditionAliasMap::read(&aliases_path)?;
            let cand = read_candidate(&cand_path)?;
            let scores = axis_scores(&table.data, &cand.chart.centroid, &cand.axis)?;
            let groups = condition_groups(&table, &aliases)?;
            let pos: Vec<f64> = groups.pos_indices.iter().map(|&i| scores[i]).collect();
            let neg: Vec<f64> = groups.neg_indices.iter().map(|&i| scores[i]).collect();
            (pos, neg, vec![acts, meta, aliases_path, cand_path])
        }
    };

    let report = couple(&pos, &neg, ctx.seed, &ctx.config.coupling)?;
    let inputs = DatasetManifest::freeze(&input_paths)?;
    let config = json!({"args": args, "coupling": ctx.config.coupling});
    Envelope::new("couple", ctx.seed, config, Some(inputs), report)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
