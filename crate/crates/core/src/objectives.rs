//! Training objectives: language modelling, masked feature prediction,
//! next time-step prediction and the weighted multi-task loss.

use crate::data::layout::{D_CODE, D_EVENT};
use crate::data::{Labels, Task, TimelineBatch};
use crate::decoder::{TokenBatch, PAD};
use crate::encoders::NoteBatch;
use crate::error::{Error, Result};
use crate::model::{Net, Pass};
use crate::tensor::{BinaryLossKind, Rng, Scalar, Tape, Tensor, Var};

/// Fraction of valid steps selected for masked feature prediction.
pub const MFP_RATE: f64 = 0.15;
pub const P_ZERO: f64 = 0.8;
pub const P_CODE_MASK: f64 = 0.1;

/// Loss weights and focal parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Base λ for MFP, scaled by [`lambda_schedule`].
    pub lambda_mfp: f64,
    pub lambda_ntp: f64,
    /// hf, t2dm, readmit.
    pub task: [f64; 3],
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mfp: 1.0,
            lambda_ntp: 1.0,
            task: [0.90, 0.86, 0.85],
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

/// Auxiliary-loss multiplier for 1-based `epoch`: 1.0 through epoch 3,
/// linear to 0.5 at epoch 5, then 0.5.
pub fn lambda_schedule(epoch: usize) -> f64 {
    match epoch {
        0..=3 => 1.0,
        4 => 0.75,
        _ => 0.5,
    }
}

/// `L_LM + λ_MFP·L_MFP + λ_NTP·L_NTP` for plain component values.
pub fn combine_pretrain(lm: f64, mfp: f64, ntp: f64, epoch: usize, w: &LossWeights) -> f64 {
    let s = lambda_schedule(epoch);
    lm + w.lambda_mfp * s * mfp + w.lambda_ntp * s * ntp
}

/// Mean token cross-entropy over non-PAD targets.
pub fn lm_loss<S: Scalar>(tape: &mut Tape<'_, S>, logits: Var, tokens: &TokenBatch) -> Result<Var> {
    let include: Vec<bool> = tokens.targets.iter().map(|&t| t != PAD).collect();
    if !include.iter().any(|&x| x) {
        return Err(Error::UndefinedMetric("language-model loss over zero non-padding tokens".into()));
    }
    let v = *tape.shape(logits).last().unwrap();
    let flat = tape.reshape(logits, &[tokens.targets.len(), v])?;
    tape.cross_entropy(flat, &tokens.targets, Some(&include))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBranch {
    /// All 128 dims zeroed.
    Zero,
    /// Code block replaced by the learned mask vector, numeric block kept.
    CodeMask,
    /// Input unchanged, still reconstructed.
    Keep,
}

/// Masked positions of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Flat `b * T + t` row and its branch, in row order.
    pub entries: Vec<(usize, MaskBranch)>,
    /// Original embeddings of the selected rows, `[|M|, 128]`.
    pub originals: Vec<f32>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    fn rows_of(&self, branch: MaskBranch) -> Vec<usize> {
        self.entries.iter().filter(|e| e.1 == branch).map(|e| e.0).collect()
    }
}

pub fn draw_branch(rng: &mut Rng) -> MaskBranch {
    let u = rng.uniform();
    if u < P_ZERO {
        MaskBranch::Zero
    } else if u < P_ZERO + P_CODE_MASK {
        MaskBranch::CodeMask
    } else {
        MaskBranch::Keep
    }
}

/// Selects `round(0.15 · valid)` valid steps per sequence and a branch for
/// each.
pub fn plan_mfp(batch: &TimelineBatch, rng: &mut Rng) -> MaskPlan {
    let t = batch.seq_len();
    let mut entries = Vec::new();
    for b in 0..batch.batch_size() {
        let valid: Vec<usize> = (0..t).filter(|&i| batch.valid_mask[b * t + i]).collect();
        let k = (MFP_RATE * valid.len() as f64).round() as usize;
        let mut picks: Vec<usize> = rng.sample_indices(valid.len(), k).into_iter().map(|j| valid[j]).collect();
        picks.sort_unstable();
        for i in picks {
            entries.push((b * t + i, draw_branch(rng)));
        }
    }
    let data = batch.embeddings.data();
    let originals = entries
        .iter()
        .flat_map(|&(r, _)| data[r * D_EVENT..(r + 1) * D_EVENT].iter().copied())
        .collect();
    MaskPlan { entries, originals }
}

/// Plain-value masking of a batch with the given mask vector.
pub fn apply_mfp_mask(batch: &TimelineBatch, mask_vector: &[f32], rng: &mut Rng) -> Result<(TimelineBatch, MaskPlan)> {
    if mask_vector.len() != D_CODE {
        return Err(Error::Dimension {
            op: "apply_mfp_mask",
            lhs: vec![D_CODE],
            rhs: vec![mask_vector.len()],
        });
    }
    let plan = plan_mfp(batch, rng);
    let mut out = batch.clone();
    let data = out.embeddings.data_mut();
    for &(r, branch) in &plan.entries {
        let row = &mut data[r * D_EVENT..(r + 1) * D_EVENT];
        match branch {
            MaskBranch::Zero => row.fill(0.0),
            MaskBranch::CodeMask => row[..D_CODE].copy_from_slice(mask_vector),
            MaskBranch::Keep => {}
        }
    }
    Ok((out, plan))
}

/// Rows to withhold for next time-step prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct NtpPlan {
    /// Per included sequence: flat row of the last kept step (whose hidden
    /// state predicts) and of the withheld step.
    pub pairs: Vec<(usize, usize)>,
    /// Validity with the withheld steps removed.
    pub valid: Vec<bool>,
    /// Withheld embeddings `[n, 128]`.
    pub targets: Vec<f32>,
}

/// Withholds the last valid step of every sequence with at least two.
pub fn plan_ntp(batch: &TimelineBatch) -> NtpPlan {
    let t = batch.seq_len();
    let mut valid = batch.valid_mask.clone();
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    let data = batch.embeddings.data();
    for b in 0..batch.batch_size() {
        let Some(last) = (0..t).rev().find(|&i| batch.valid_mask[b * t + i]) else {
            continue;
        };
        let prev = (0..last).rev().find(|&i| batch.valid_mask[b * t + i]);
        if let Some(prev) = prev {
            let r = b * t + last;
            valid[r] = false;
            pairs.push((b * t + prev, r));
            targets.extend_from_slice(&data[r * D_EVENT..(r + 1) * D_EVENT]);
        }
    }
    NtpPlan { pairs, valid, targets }
}

/// Pretraining loss and its reported parts.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub total: Var,
    pub lm: f64,
    pub mfp: f64,
    pub ntp: f64,
    pub lambda: f64,
    /// False when the MFP plan was empty (term contributes 0).
    pub mfp_active: bool,
    pub ntp_active: bool,
}

/// Per-task parts of the fine-tuning loss (None when no label present).
#[derive(Clone, Copy, Debug)]
pub struct FinetuneTerms {
    pub total: Var,
    pub task: [Option<f64>; 3],
}

impl<'a, S: Scalar> Net<'a, S> {
    /// `(1/|M|) Σ ‖MLP(h_i) − s_i‖²` over the plan; None for an empty plan.
    pub fn mfp_loss(&self, tape: &mut Tape<'a, S>, hidden: Var, plan: &MaskPlan) -> Result<Option<Var>> {
        if plan.is_empty() {
            return Ok(None);
        }
        let h = tape.gather_rows(hidden, &plan.rows())?;
        let z = self.linear(tape, h, "mfp.fc1")?;
        let z = tape.gelu(z)?;
        let pred = self.linear(tape, z, "mfp.fc2")?;
        let target = tape.input(Tensor::new(vec![plan.len(), D_EVENT], plan.originals.clone())?.cast());
        let diff = tape.sub(pred, target)?;
        let sq = tape.sum_squares(diff)?;
        Ok(Some(tape.scale(sq, 1.0 / plan.len() as f64)?))
    }

    /// Masked encoder input for `plan`: zeroed rows and mask-vector code
    /// blocks (the mask vector receives gradient).
    pub fn mask_input(&self, tape: &mut Tape<'a, S>, x: Var, plan: &MaskPlan) -> Result<Var> {
        let rows = tape.value(x).len() / D_EVENT;
        let mut keep = vec![1.0; rows];
        for r in plan.rows_of(MaskBranch::Zero) {
            keep[r] = 0.0;
        }
        let mut x = tape.mask_rows(x, &keep)?;
        let code_rows = plan.rows_of(MaskBranch::CodeMask);
        if !code_rows.is_empty() {
            let mv = self.p(tape, "mfp.mask_vector")?;
            x = tape.set_block(x, mv, &code_rows, 0)?;
        }
        Ok(x)
    }

    /// `mean_n ‖W h_prev + b − s_withheld‖²`; None when no sequence has two
    /// valid steps.
    pub fn ntp_loss(&self, tape: &mut Tape<'a, S>, hidden: Var, plan: &NtpPlan) -> Result<Option<Var>> {
        if plan.pairs.is_empty() {
            return Ok(None);
        }
        let prev: Vec<usize> = plan.pairs.iter().map(|p| p.0).collect();
        let h = tape.gather_rows(hidden, &prev)?;
        let pred = self.linear(tape, h, "ntp.proj")?;
        let target = tape.input(Tensor::new(vec![prev.len(), D_EVENT], plan.targets.clone())?.cast());
        let diff = tape.sub(pred, target)?;
        let sq = tape.sum_squares(diff)?;
        Ok(Some(tape.scale(sq, 1.0 / prev.len() as f64)?))
    }

    /// Full pretraining objective. The LM term decodes from the clean
    /// encoding; MFP and NTP each run their own encoder pass on the masked
    /// or withheld input. A term whose base λ is zero is skipped entirely.
    /// Batch-norm statistics are reported from the clean pass only.
    #[allow(clippy::too_many_arguments)]
    pub fn pretrain_loss(
        &self,
        tape: &mut Tape<'a, S>,
        batch: &TimelineBatch,
        notes: &NoteBatch,
        tokens: &TokenBatch,
        epoch: usize,
        weights: &LossWeights,
        mask_rng: &mut Rng,
        pass: &mut Pass<'_>,
    ) -> Result<PretrainTerms> {
        let lambda = lambda_schedule(epoch);
        let (memory, _) = self.encode_batch(tape, batch, notes, pass)?;
        let logits = self.forward_teacher_forced(tape, &memory, tokens, pass)?;
        let lm = lm_loss(tape, logits, tokens)?;
        let mut total = lm;
        let mut terms = PretrainTerms {
            total: lm,
            lm: tape.scalar(lm).as_f64(),
            mfp: 0.0,
            ntp: 0.0,
            lambda,
            mfp_active: false,
            ntp_active: false,
        };
        let saved = std::mem::take(&mut pass.bn_updates);
        if weights.lambda_mfp > 0.0 {
            let plan = plan_mfp(batch, mask_rng);
            if !plan.is_empty() {
                let x = tape.input(batch.embeddings.cast());
                let x = self.mask_input(tape, x, &plan)?;
                let h = self.encode_structured(tape, x, &batch.valid_mask, pass)?;
                if let Some(l) = self.mfp_loss(tape, h, &plan)? {
                    terms.mfp = tape.scalar(l).as_f64();
                    terms.mfp_active = true;
                    let w = tape.scale(l, weights.lambda_mfp * lambda)?;
                    total = tape.add(total, w)?;
                }
            }
        }
        if weights.lambda_ntp > 0.0 {
            let plan = plan_ntp(batch);
            if !plan.pairs.is_empty() {
                let x = tape.input(batch.embeddings.cast());
                let h = self.encode_structured(tape, x, &plan.valid, pass)?;
                if let Some(l) = self.ntp_loss(tape, h, &plan)? {
                    terms.ntp = tape.scalar(l).as_f64();
                    terms.ntp_active = true;
                    let w = tape.scale(l, weights.lambda_ntp * lambda)?;
                    total = tape.add(total, w)?;
                }
            }
        }
        pass.bn_updates = saved;
        terms.total = total;
        Ok(terms)
    }

    /// `Σ w_task · L_task` with BCE for hf and t2dm and focal loss for
    /// readmission, each averaged over admissions that carry the label.
    pub fn finetune_loss(&self, tape: &mut Tape<'a, S>, probs: [Var; 3], labels: &[Labels], weights: &LossWeights) -> Result<FinetuneTerms> {
        finetune_loss(tape, probs, labels, weights)
    }
}

pub fn finetune_loss<S: Scalar>(tape: &mut Tape<'_, S>, probs: [Var; 3], labels: &[Labels], weights: &LossWeights) -> Result<FinetuneTerms> {
    let mut total: Option<Var> = None;
    let mut task_terms = [None; 3];
    for (i, task) in Task::ALL.into_iter().enumerate() {
        let present: Vec<bool> = labels.iter().map(|l| l.get(task).is_some()).collect();
        if !present.iter().any(|&p| p) {
            continue;
        }
        let y: Vec<f64> = labels.iter().map(|l| l.get(task).unwrap_or(0) as f64).collect();
        let kind = if task == Task::Readmit {
            BinaryLossKind::Focal {
                gamma: weights.focal_gamma,
                alpha: weights.focal_alpha,
            }
        } else {
            BinaryLossKind::Bce
        };
        let l = tape.binary_loss(probs[i], &y, &present, kind)?;
        task_terms[i] = Some(tape.scalar(l).as_f64());
        let w = tape.scale(l, weights.task[i])?;
        total = Some(match total {
            Some(t) => tape.add(t, w)?,
            None => w,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("fine-tuning batch carries no labels".into()))?;
    Ok(FinetuneTerms { total, task: task_terms })
}
