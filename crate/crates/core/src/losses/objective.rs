use serde::{Deserialize, Serialize};

use super::{total_loss, LossBreakdown, PlppConfig};
use crate::error::{ensure, Result};
use crate::model::{BoundModel, ClassSpec, ImageFeatureBank};
use crate::numerics::{topk_indices, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CeOnly,
    Plpp,
}

/// Scalar nodes of one objective evaluation.
///
/// `ppl` and `ippl` are always built; under [`Objective::CeOnly`] they are
/// monitored but do not feed `total`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub ce: Var,
    pub ppl: Var,
    pub ippl: Var,
    pub total: Var,
    pub objective: Objective,
}

impl ObjectiveVars {
    /// Values of the nodes, with `lambda` reported as 0 for the CE-only objective.
    pub fn breakdown(&self, tape: &Tape, config: &PlppConfig) -> Result<LossBreakdown> {
        let effective = match self.objective {
            Objective::CeOnly => PlppConfig {
                lambda: 0.0,
                ..config.clone()
            },
            Objective::Plpp => config.clone(),
        };
        let b = total_loss(
            tape.scalar(self.ce)?,
            tape.scalar(self.ppl)?,
            tape.scalar(self.ippl)?,
            &effective,
        )?;
        debug_assert!(
            self.objective == Objective::CeOnly
                || b.total.to_bits() == tape.scalar(self.total)?.to_bits()
        );
        Ok(b)
    }
}

/// Builds the batch objective on `tape`.
///
/// The CE term is the mean over `images` of `-ln max(p(y | x), epsilon)`.
/// The perplexity terms are computed once from the prompt and every class in
/// `classes`, averaging KL rows over positions and classes.
pub fn build_objective(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    prompt: Var,
    classes: &[ClassSpec],
    images: &ImageFeatureBank,
    config: &PlppConfig,
    objective: Objective,
) -> Result<ObjectiveVars> {
    let vocab = model.model().config.vocab_size;
    config.validate(vocab)?;
    ensure!(!classes.is_empty(), Parameter, "no classes");
    ensure!(!images.is_empty(), Parameter, "empty image batch");
    ensure!(
        images.labels.iter().all(|&l| l < classes.len()),
        Parameter,
        "image label outside the {} classes",
        classes.len()
    );
    ensure!(
        images.joint_dim() == model.model().config.joint_dim,
        Dimension,
        "image features have width {}, model joint_dim is {}",
        images.joint_dim(),
        model.model().config.joint_dim
    );

    let mut text_features = Vec::with_capacity(classes.len());
    let mut output_dists = Vec::with_capacity(classes.len());
    for class in classes {
        let enc = model.encode_class(tape, prompt, class)?;
        text_features.push(enc.text_feature);
        let logits = model.lm_head_logits(tape, enc.hidden)?;
        output_dists.push(tape.row_softmax(logits, 1.0)?);
    }

    // class prediction and alignment loss
    let text = tape.concat_rows(&text_features)?;
    let text_t = tape.transpose(text)?;
    let feats = tape.constant(images.features.clone());
    let sims = tape.matmul(feats, text_t)?;
    let probs = tape.row_softmax(sims, config.tau)?;
    let picked = tape.pick_per_row(probs, images.labels.clone())?;
    let log_p = tape.log_floor(picked, config.epsilon)?;
    let mean_log_p = tape.mean(log_p)?;
    let ce = tape.scale(mean_log_p, -1.0)?;

    // soft prompt labels
    let cos = tape.cosine_similarity(prompt, model.embedding())?;
    let soft_labels = tape.row_softmax(cos, config.tau_q)?;

    let q_indices = row_topk(tape, soft_labels, config.k)?;
    let q1_raw = tape.gather_cols(soft_labels, q_indices.clone())?;
    let q1 = tape.row_normalize_sum(q1_raw)?;

    let mut ppl_forward = Vec::with_capacity(classes.len());
    let mut ppl_reverse = Vec::with_capacity(classes.len());
    let mut ippl_forward = Vec::with_capacity(classes.len());
    let mut ippl_reverse = Vec::with_capacity(classes.len());
    for &p in &output_dists {
        let p1_raw = tape.gather_cols(p, q_indices.clone())?;
        let p1 = tape.row_normalize_sum(p1_raw)?;
        ppl_forward.push(tape.kl_rows(q1, p1, config.epsilon)?);
        ppl_reverse.push(tape.kl_rows(p1, q1, config.epsilon)?);

        let p_indices = row_topk(tape, p, config.k)?;
        let p2_raw = tape.gather_cols(p, p_indices.clone())?;
        let p2 = tape.row_normalize_sum(p2_raw)?;
        let q2_raw = tape.gather_cols(soft_labels, p_indices)?;
        let q2 = tape.row_normalize_sum(q2_raw)?;
        ippl_forward.push(tape.kl_rows(q2, p2, config.epsilon)?);
        ippl_reverse.push(tape.kl_rows(p2, q2, config.epsilon)?);
    }
    let ppl = mutual_term(tape, &ppl_forward, &ppl_reverse)?;
    let ippl = mutual_term(tape, &ippl_forward, &ippl_reverse)?;

    let total = match objective {
        Objective::CeOnly => ce,
        Objective::Plpp => {
            let a = tape.scale(ppl, config.alpha)?;
            let b = tape.scale(ippl, 1.0 - config.alpha)?;
            let mix = tape.add(a, b)?;
            let reg = tape.scale(mix, config.lambda)?;
            tape.add(ce, reg)?
        }
    };
    Ok(ObjectiveVars {
        ce,
        ppl,
        ippl,
        total,
        objective,
    })
}

/// Top-`k` indices of every row of a node's current value.
fn row_topk(tape: &Tape, dist: Var, k: usize) -> Result<Vec<Vec<usize>>> {
    tape.value(dist)
        .row_iter()
        .map(|r| topk_indices(r, k))
        .collect()
}

fn mutual_term(tape: &mut Tape, forward: &[Var], reverse: &[Var]) -> Result<Var> {
    let mut halves = Vec::with_capacity(2);
    for parts in [forward, reverse] {
        let rows = tape.concat_rows(parts)?;
        let mean = tape.mean(rows)?;
        let half = tape.scale(mean, 0.5)?;
        halves.push(tape.exp(half)?);
    }
    tape.add(halves[0], halves[1])
}
