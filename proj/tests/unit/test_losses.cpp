#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "spikeseg/errors.hpp"
#include "spikeseg/losses.hpp"

using namespace spikeseg;
using namespace spikeseg::losses;
using ad::Tensor;

namespace {

Tensor log_matrix(std::size_t rows, std::size_t cols, const std::vector<double>& probs) {
  std::vector<double> l(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) l[i] = std::log(probs[i]);
  return Tensor::constant({rows, cols}, l);
}

// Sums path probabilities over every length-T label string that collapses
// (merge repeats, drop blanks) to the target.
double brute_force_ctc(const std::vector<double>& probs, std::size_t T, std::size_t V, const std::vector<int>& target,
                       int blank) {
  double total = 0.0;
  std::vector<int> path(T, 0);
  while (true) {
    std::vector<int> collapsed;
    int prev = -1;
    double p = 1.0;
    for (std::size_t t = 0; t < T; ++t) {
      p *= probs[t * V + path[t]];
      if (path[t] != prev && path[t] != blank) collapsed.push_back(path[t]);
      prev = path[t];
    }
    if (collapsed == target) total += p;
    std::size_t k = 0;
    while (k < T && ++path[k] == static_cast<int>(V)) path[k++] = 0;
    if (k == T) break;
  }
  return total;
}

std::size_t recursive_distance(const std::vector<int>& a, std::size_t i, const std::vector<int>& b, std::size_t j) {
  if (i == 0) return j;
  if (j == 0) return i;
  const std::size_t sub = recursive_distance(a, i - 1, b, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1);
  const std::size_t del = recursive_distance(a, i - 1, b, j) + 1;
  const std::size_t ins = recursive_distance(a, i, b, j - 1) + 1;
  return std::min({sub, del, ins});
}

std::vector<double> random_posteriors(std::size_t T, std::size_t V, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::vector<double> p(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += (p[t * V + v] = d(rng));
    for (std::size_t v = 0; v < V; ++v) p[t * V + v] /= z;
  }
  return p;
}

void all_targets(std::size_t labels, std::size_t max_len, std::vector<std::vector<int>>& out) {
  out.push_back({});
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<int> t(len, 0);
    while (true) {
      out.push_back(t);
      std::size_t k = 0;
      while (k < len && ++t[k] == static_cast<int>(labels)) t[k++] = 0;
      if (k == len) break;
    }
  }
}

}  // namespace

TEST_CASE("ce examples") {
  const auto uniform = log_matrix(1, 4, {0.25, 0.25, 0.25, 0.25});
  CHECK(ce_loss(uniform, std::vector<int>{2}).item() == doctest::Approx(std::log(4.0)));
  const auto onehot = Tensor::constant({1, 3}, {0.0, -1e30, -1e30});
  CHECK(ce_loss(onehot, std::vector<int>{0}).item() == doctest::Approx(0.0));
  const auto two = log_matrix(2, 2, {0.5, 0.5, 0.75, 0.25});
  CHECK(ce_loss(two, std::vector<int>{0, 1}).item() == doctest::Approx((std::log(2.0) + std::log(4.0)) / 2));
  CHECK(ce_loss(two, std::vector<int>{0, 1}).item() == doctest::Approx(1.0397).epsilon(1e-4));
  // pad positions are skipped
  CHECK(ce_loss(two, std::vector<int>{0, 9}, 9).item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(ce_loss(two, std::vector<int>{0}), ContractError);
}

TEST_CASE("ctc examples") {
  const auto one = log_matrix(1, 2, {0.3, 0.7});
  CHECK(ctc_loss(one, std::vector<int>{0}, 1).item() == doctest::Approx(-std::log(0.3)));
  const auto half = log_matrix(2, 2, {0.5, 0.5, 0.5, 0.5});
  CHECK(ctc_loss(half, std::vector<int>{0}, 1).item() == doctest::Approx(-std::log(0.75)));
  CHECK(ctc_loss(half, std::vector<int>{0}, 1).item() == doctest::Approx(0.28768).epsilon(1e-5));
}

TEST_CASE("ctc feasibility") {
  CHECK(ctc_min_frames(std::vector<int>{1, 2, 3}) == 3);
  CHECK(ctc_min_frames(std::vector<int>{1, 1, 2, 2}) == 6);
  const auto p = log_matrix(2, 3, {0.3, 0.3, 0.4, 0.3, 0.3, 0.4});
  CHECK_THROWS_AS(ctc_loss(p, std::vector<int>{0, 0}, 2), InfeasibleAlignmentError);
  CHECK_THROWS_AS(ctc_loss(p, std::vector<int>{0, 1, 0}, 2), InfeasibleAlignmentError);
  CHECK_THROWS_AS(ctc_loss(p, std::vector<int>{2}, 2), DimensionError);
  CHECK_THROWS_AS(ctc_loss(p, std::vector<int>{0}, 3), DimensionError);
}

TEST_CASE("ctc matches path enumeration") {
  std::mt19937_64 rng(13);
  std::size_t checked = 0;
  for (std::size_t V = 2; V <= 3; ++V) {
    const int blank = static_cast<int>(V) - 1;
    std::vector<std::vector<int>> targets;
    all_targets(V - 1, 2, targets);
    for (std::size_t T = 1; T <= 4; ++T) {
      for (const auto& y : targets) {
        if (T < ctc_min_frames(y)) continue;
        for (int draw = 0; draw < 5; ++draw) {
          const auto p = random_posteriors(T, V, rng);
          const double oracle = -std::log(brute_force_ctc(p, T, V, y, blank));
          const double got = ctc_loss(log_matrix(T, V, p), y, blank).item();
          CHECK(std::abs(got - oracle) <= 1e-9);
          ++checked;
        }
      }
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("ctc responds to one frame like the enumeration does") {
  std::mt19937_64 rng(14);
  const std::size_t T = 4, V = 3;
  const std::vector<int> y{0, 1};
  auto p = random_posteriors(T, V, rng);
  const double before = ctc_loss(log_matrix(T, V, p), y, 2).item();
  // boost the blank on frame 2 and renormalize
  p[2 * V + 2] *= 3.0;
  const double z = p[2 * V] + p[2 * V + 1] + p[2 * V + 2];
  for (std::size_t v = 0; v < V; ++v) p[2 * V + v] /= z;
  const double after = ctc_loss(log_matrix(T, V, p), y, 2).item();
  CHECK(after == doctest::Approx(-std::log(brute_force_ctc(p, T, V, y, 2))).epsilon(1e-12));
  CHECK(after != doctest::Approx(before));
}

TEST_CASE("loss gradients") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> logits(6 * 4);
    for (auto& x : logits) x = d(rng);
    auto x = Tensor::parameter({6, 4}, logits);
    const std::vector<int> y{0, 2, 2};
    const auto ctc = ad::grad_check([&](const Tensor& t) { return ctc_loss(ad::log_softmax_rows(t), y, 3); }, x);
    CHECK(ctc.max_rel_error <= 1e-4);
    const std::vector<int> tokens{1, 0, 3, 3, 2, 1};
    const auto ce = ad::grad_check([&](const Tensor& t) { return ce_loss(ad::log_softmax_rows(t), tokens, 3); }, x);
    CHECK(ce.max_rel_error <= 1e-4);
    auto proxy = Tensor::parameter({1}, {3.0 + d(rng)});
    const auto qua = ad::grad_check([&](const Tensor& t) { return quantity_loss(ad::sum(t), 5); }, proxy);
    CHECK(qua.max_rel_error <= 1e-4);
  }
}

TEST_CASE("quantity and combined losses") {
  CHECK(quantity_loss(Tensor::scalar(5.0), 5).item() == 0.0);
  CHECK(quantity_loss(Tensor::scalar(7.0), 5).item() == 2.0);
  CHECK(quantity_loss(Tensor::scalar(4.3), 5).item() == doctest::Approx(0.7));
  const LossWeights defaults;
  CHECK(combined_loss(2.0, 4.0, 1.0, defaults) == 4.0);
  CHECK(combined_loss(2.0, 4.0, 1.0, LossWeights{1.0, 0.0, 0.0}) == 2.0);
  CHECK(combined_loss(0.0, 0.0, 0.0, defaults) == 0.0);
  CHECK(combined_loss(Tensor::scalar(2.0), Tensor::scalar(4.0), Tensor::scalar(1.0), defaults).item() == 4.0);
  // linear in each component
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng), k = u(rng);
    CHECK(combined_loss(k * a, b, c, defaults) - combined_loss(0, b, c, defaults) ==
          doctest::Approx(k * (combined_loss(a, b, c, defaults) - combined_loss(0, b, c, defaults))));
  }
  CHECK_THROWS_AS((LossWeights{-1.0, 0.25, 1.0}.validate()), ContractError);
}

TEST_CASE("per examples") {
  CHECK(per(std::vector<int>{1, 2, 3}, std::vector<int>{1, 3}) == doctest::Approx(1.0 / 3));
  CHECK(per(std::vector<int>{4, 5}, std::vector<int>{4, 5}) == 0.0);
  CHECK(per(std::vector<int>{1}, std::vector<int>{2, 3}) == 2.0);
  CHECK_THROWS_AS(per(std::vector<int>{}, std::vector<int>{1}), ContractError);
}

TEST_CASE("edit distance matches the recursion") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> len(0, 6), sym(0, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> a(len(rng)), b(len(rng));
    for (auto& x : a) x = sym(rng);
    for (auto& x : b) x = sym(rng);
    const auto oracle = recursive_distance(a, a.size(), b, b.size());
    CHECK(edit_distance(a, b) == oracle);
    CHECK(edit_distance(b, a) == oracle);
    CHECK(edit_distance(a, a) == 0);
    if (!a.empty()) CHECK(per(a, b) == static_cast<double>(oracle) / static_cast<double>(a.size()));
  }
}

TEST_CASE("boundary accuracy") {
  const std::vector<std::size_t> ref{10, 20};
  CHECK(boundary_accuracy(ref, ref, 0) == 1.0);
  CHECK(boundary_accuracy(std::vector<std::size_t>{}, ref, 2) == 0.0);
  CHECK(boundary_accuracy(std::vector<std::size_t>{12, 40}, ref, 2) == 0.5);
  // one prediction cannot serve two references
  CHECK(boundary_accuracy(std::vector<std::size_t>{11}, std::vector<std::size_t>{10, 12}, 2) == 0.5);
  CHECK(boundary_accuracy(std::vector<std::size_t>{9, 13}, std::vector<std::size_t>{11, 12}, 2) == 1.0);
  CHECK_THROWS_AS(boundary_accuracy(ref, std::vector<std::size_t>{}, 2), ContractError);
}
