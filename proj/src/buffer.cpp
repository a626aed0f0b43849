#include "ottabp/buffer.hpp"

#include <numeric>
#include <stdexcept>

namespace ottabp {

void BatchComposition::validate() const {
  if (n_label < 1 || n_unlabel < 1)
    throw ConfigError("batch composition counts must be positive");
  if (n_unlabel != 3 * n_label)
    throw ConfigError("batch composition must keep a 3:1 unlabeled:labeled ratio");
}

DualQueueBuffer::DualQueueBuffer(int cap_unlabel, int cap_label)
    : cap_unlabel_(cap_unlabel), cap_label_(cap_label) {
  if (cap_label < 1) throw ConfigError("label queue capacity must be positive");
  if (cap_unlabel != 2 * cap_label)
    throw ConfigError("queue capacities must keep a 2:1 unlabeled:labeled ratio");
}

void DualQueueBuffer::push(const StreamEvent& event) {
  if (event.label) {
    q_label_.emplace_back(event.segment, *event.label);
    if (static_cast<int>(q_label_.size()) > cap_label_) q_label_.pop_front();
    newest_is_labeled_ = true;
  } else {
    q_unlabel_.push_back(event);
    if (static_cast<int>(q_unlabel_.size()) > cap_unlabel_) q_unlabel_.pop_front();
    newest_is_labeled_ = false;
  }
  has_newest_ = true;
}

namespace {

// Partial Fisher-Yates draw of k distinct indices from 0..n-1, optionally
// excluding the last index (the newest entry, which is already placed).
void draw_indices(int n, int k, bool exclude_last, bool with_replacement, Rng& rng,
                  std::vector<int>& out) {
  out.clear();
  if (k <= 0) return;
  if (with_replacement) {
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int i = 0; i < k; ++i) out.push_back(pick(rng));
    return;
  }
  const int pool = exclude_last ? n - 1 : n;
  std::vector<int> idx(static_cast<std::size_t>(pool));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, pool - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    out.push_back(idx[static_cast<std::size_t>(i)]);
  }
}

}  // namespace

std::vector<SampledItem> DualQueueBuffer::sample_batch(const BatchComposition& comp,
                                                       Rng& rng) const {
  comp.validate();
  if (q_unlabel_.empty())
    throw std::logic_error("sample_batch: unlabeled queue is empty");

  int quota_u = comp.n_unlabel;
  int quota_l = comp.n_label;
  if (q_label_.empty()) {
    quota_u += quota_l;  // reassign the labeled quota
    quota_l = 0;
  }

  const bool newest_labeled = has_newest_ && newest_is_labeled_ && !q_label_.empty();
  std::vector<SampledItem> batch;
  batch.reserve(static_cast<std::size_t>(comp.total()));
  std::vector<int> picks;

  // Unlabeled section; the newest event leads it when it is unlabeled.
  {
    const int n = static_cast<int>(q_unlabel_.size());
    int need = quota_u;
    if (!newest_labeled) {
      batch.push_back({&q_unlabel_.back().segment, nullptr});
      --need;
    }
    const bool wor = n >= quota_u;
    draw_indices(n, need, /*exclude_last=*/wor && !newest_labeled, !wor, rng, picks);
    for (int i : picks) {
      const auto& ev = q_unlabel_[static_cast<std::size_t>(i)];
      batch.push_back({&ev.segment, nullptr});
    }
  }

  // Labeled section.
  if (quota_l > 0) {
    const int n = static_cast<int>(q_label_.size());
    int need = quota_l;
    if (newest_labeled) {
      batch.push_back({&q_label_.back().first, &q_label_.back().second});
      --need;
    }
    const bool wor = n >= quota_l;
    draw_indices(n, need, /*exclude_last=*/wor && newest_labeled, !wor, rng, picks);
    for (int i : picks) {
      const auto& [seg, label] = q_label_[static_cast<std::size_t>(i)];
      batch.push_back({&seg, &label});
    }
  }

  return batch;
}

}  // namespace ottabp
