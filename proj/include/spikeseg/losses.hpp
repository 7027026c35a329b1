// spikeseg/losses.hpp
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spikeseg/tensor.hpp"

namespace spikeseg::losses {

struct LossWeights {
  double ce = 1.0;
  double ctc = 0.25;
  double quantity = 1.0;

  void validate() const;
};

// Mean negative log-likelihood of `targets` under teacher-forced
// log-probabilities [L x V]; positions holding pad_id are skipped.
ad::Tensor ce_loss(const ad::Tensor& log_probs, std::span<const int> targets, int pad_id = -1);

// Fewest frames that can carry `targets` under CTC: one per label plus one
// blank between each pair of equal neighbours.
std::size_t ctc_min_frames(std::span<const int> targets);

// -log p(targets | log_posteriors) summed over all blank-augmented
// alignments, computed with the forward recursion in log space. The backward
// rule uses forward-backward state occupancies. Throws
// InfeasibleAlignmentError when T < ctc_min_frames(targets).
ad::Tensor ctc_loss(const ad::Tensor& log_posteriors, std::span<const int> targets, int blank);

// |proxy - target_len|.
ad::Tensor quantity_loss(const ad::Tensor& proxy, std::size_t target_len);

ad::Tensor combined_loss(const ad::Tensor& ce, const ad::Tensor& ctc, const ad::Tensor& qua, const LossWeights& w);
double combined_loss(double ce, double ctc, double qua, const LossWeights& w);

// Unit-cost Levenshtein distance.
std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp);
// edit_distance / |ref|; throws ContractError for an empty reference.
double per(std::span<const int> ref, std::span<const int> hyp);

// Fraction of reference boundaries matched one-to-one by a predicted boundary
// within +-tolerance frames. References are visited in ascending order and
// each takes the earliest unmatched prediction in range.
double boundary_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> reference,
                         std::size_t tolerance);

}  // namespace spikeseg::losses
