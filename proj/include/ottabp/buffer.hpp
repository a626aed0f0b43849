#pragma once

#include <deque>
#include <optional>
#include <utility>
#include <vector>

#include "ottabp/common.hpp"
#include "ottabp/signal.hpp"

namespace ottabp {

// Fixed 3:1 unlabeled:labeled batch composition (24 + 8 of 32 by default).
struct BatchComposition {
  int n_unlabel = 24;
  int n_label = 8;

  int total() const { return n_unlabel + n_label; }
  void validate() const;
};

// One sampled buffer entry; pointers stay valid until the next push.
struct SampledItem {
  const SignalSegment* segment = nullptr;
  const BPLabel* label = nullptr;  // nullptr for unlabeled entries
};

// Two FIFO queues with 2:1 capacities: unlabeled stream events in
// q_unlabel, calibration samples in q_label. Oldest entries are evicted
// first when a queue is full.
class DualQueueBuffer {
 public:
  DualQueueBuffer(int cap_unlabel = 64, int cap_label = 32);

  // Labeled events are routed to q_label, unlabeled events to q_unlabel.
  void push(const StreamEvent& event);

  // Draws comp.total() items. The most recently pushed event is always
  // included and counts against its queue's quota. Remaining slots are
  // drawn uniformly without replacement while a queue holds at least its
  // quota, otherwise with replacement. An empty q_label donates its quota
  // to q_unlabel.
  std::vector<SampledItem> sample_batch(const BatchComposition& comp, Rng& rng) const;

  int unlabel_size() const { return static_cast<int>(q_unlabel_.size()); }
  int label_size() const { return static_cast<int>(q_label_.size()); }
  int unlabel_capacity() const { return cap_unlabel_; }
  int label_capacity() const { return cap_label_; }

  const StreamEvent& unlabel_at(int i) const { return q_unlabel_.at(static_cast<std::size_t>(i)); }
  const std::pair<SignalSegment, BPLabel>& label_at(int i) const {
    return q_label_.at(static_cast<std::size_t>(i));
  }

 private:
  int cap_unlabel_;
  int cap_label_;
  std::deque<StreamEvent> q_unlabel_;
  std::deque<std::pair<SignalSegment, BPLabel>> q_label_;
  bool newest_is_labeled_ = false;
  bool has_newest_ = false;
};

}  // namespace ottabp
