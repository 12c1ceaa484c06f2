// Five-term training loss on decoder layer predictions.
//
// Per layer: class cross entropy over every query (unmatched queries get the
// no-object class, the last logit column), binary cross entropy and dice and
// center L1 averaged over matched pairs, and a score regression pushing each
// query's confidence toward the IoU its binarized mask actually achieves
// against its matched instance (0 for unmatched queries). The total is the
// weighted sum, and losses from multiple layers add up.
#pragma once

#include <cmath>
#include <vector>

#include "qseg/matching.hpp"
#include "qseg/tape.hpp"

namespace qseg {

struct LossBreakdown {
  double ce = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double center = 0.0;
  double score = 0.0;
  double total_value = 0.0;
  Node total;  // differentiable weighted sum
};

inline LossBreakdown layer_loss(Tape& t, const LayerPredictionN& pred,
                                const std::vector<GroundTruthInstance>& gts,
                                const Assignment& assign, const LossWeights& lw) {
  // Dimensions only; val() references would dangle across tape pushes.
  const int nq = t.val(pred.class_logits).rows;
  const int ncls = t.val(pred.class_logits).cols;
  const int m = t.val(pred.mask_logits).cols;
  const int nmatch = static_cast<int>(assign.pairs.size());
  constexpr double kDiceEps = 1e-6;

  for (const auto& [q, g] : assign.pairs) {
    if (q < 0 || q >= nq || g < 0 || g >= static_cast<int>(gts.size()))
      throw std::invalid_argument("layer_loss: assignment references out-of-range query or gt");
  }

  // Class target one-hots; default row is the no-object column.
  Mat onehot(nq, ncls, 0.0);
  for (int q = 0; q < nq; ++q) onehot.at(q, ncls - 1) = 1.0;
  for (const auto& [q, g] : assign.pairs) {
    onehot.at(q, ncls - 1) = 0.0;
    onehot.at(q, gts[static_cast<size_t>(g)].class_id) = 1.0;
  }
  const Node logp = t.log_softmax_rows(pred.class_logits);
  const Node ce = t.affine(t.sum_all(t.mul(logp, t.input(onehot))), -1.0 / nq, 0.0);

  Node bce, dice, center;
  if (nmatch > 0) {
    std::vector<int> qrows;
    Mat tgt(nmatch, m, 0.0);
    Mat tgt_sq_sum(nmatch, 1, 0.0);  // binary targets, so sum == sum of squares
    Mat ctr(nmatch, 3, 0.0);
    for (int p = 0; p < nmatch; ++p) {
      const auto& [q, g] = assign.pairs[static_cast<size_t>(p)];
      const GroundTruthInstance& gt = gts[static_cast<size_t>(g)];
      if (static_cast<int>(gt.sup_mask.size()) != m)
        throw std::invalid_argument("layer_loss: gt mask width mismatch");
      qrows.push_back(q);
      double s = 0.0;
      for (int c = 0; c < m; ++c) {
        tgt.at(p, c) = gt.sup_mask[static_cast<size_t>(c)];
        s += tgt.at(p, c);
      }
      tgt_sq_sum.at(p, 0) = s;
      for (int k = 0; k < 3; ++k) ctr.at(p, k) = gt.center[k];
    }
    const Node x = t.gather_rows(pred.mask_logits, qrows);
    const Node tnode = t.input(tgt);

    // softplus(x) - t*x: binary cross entropy on logits without overflow
    bce = t.mean_all(t.sub(t.softplus(x), t.mul(tnode, x)));

    const Node prob = t.sigmoid(x);
    const Node inter = t.row_sum(t.mul(prob, tnode));
    const Node denom = t.add(t.affine(t.row_sum(t.mul(prob, prob)), 1.0, kDiceEps),
                             t.input(tgt_sq_sum));
    const Node dice_rows = t.affine(t.div(t.affine(inter, 2.0, 0.0), denom), -1.0, 1.0);
    dice = t.mean_all(dice_rows);

    const Node cdiff = t.abs(t.sub(t.gather_rows(pred.centers, qrows), t.input(ctr)));
    center = t.affine(t.sum_all(cdiff), 1.0 / nmatch, 0.0);
  } else {
    bce = t.scalar(0.0);
    dice = t.scalar(0.0);
    center = t.scalar(0.0);
  }

  // Score targets: realized IoU of the binarized mask against the matched
  // instance, zero when unmatched. Targets are constants.
  Mat score_tgt(nq, 1, 0.0);
  const Mat hard = binarize_mask_logits(t.val(pred.mask_logits), 0.5);
  for (const auto& [q, g] : assign.pairs) {
    const GroundTruthInstance& gt = gts[static_cast<size_t>(g)];
    double inter = 0.0, uni = 0.0;
    for (int c = 0; c < m; ++c) {
      const double a = hard.at(q, c);
      const double b = gt.sup_mask[static_cast<size_t>(c)];
      inter += a * b;
      uni += a + b;
    }
    uni -= inter;
    score_tgt.at(q, 0) = uni > 0.0 ? inter / uni : 1.0;
  }
  const Node sdiff = t.sub(pred.scores, t.input(score_tgt));
  const Node score = t.mean_all(t.mul(sdiff, sdiff));

  LossBreakdown out;
  out.ce = t.val(ce).at(0, 0);
  out.bce = t.val(bce).at(0, 0);
  out.dice = t.val(dice).at(0, 0);
  out.center = t.val(center).at(0, 0);
  out.score = t.val(score).at(0, 0);
  out.total = t.add(t.add(t.add(t.affine(ce, lw.ce, 0.0), t.affine(bce, lw.bce, 0.0)),
                          t.add(t.affine(dice, lw.dice, 0.0), t.affine(center, lw.center, 0.0))),
                    t.affine(score, lw.score, 0.0));
  out.total_value = t.val(out.total).at(0, 0);
  return out;
}

struct TotalLoss {
  Node total;
  std::vector<LossBreakdown> layers;
  std::vector<Assignment> assignments;  // one per layer; empty pairs when no gts
};

// Each layer is matched independently against the same ground truth and the
// per-layer totals add up (no averaging across layers).
inline TotalLoss total_loss(Tape& t, const std::vector<LayerPredictionN>& preds,
                            const std::vector<GroundTruthInstance>& gts, const LossWeights& lw) {
  if (preds.empty()) throw std::invalid_argument("total_loss: no layer predictions");
  TotalLoss out;
  bool first = true;
  for (const LayerPredictionN& pred : preds) {
    Assignment assign;
    if (!gts.empty()) assign = hungarian(cost_matrix(prediction_values(t, pred), gts, lw));
    LossBreakdown lb = layer_loss(t, pred, gts, assign, lw);
    out.total = first ? lb.total : t.add(out.total, lb.total);
    first = false;
    out.layers.push_back(lb);
    out.assignments.push_back(std::move(assign));
  }
  return out;
}

}  // namespace qseg
