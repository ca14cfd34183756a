#pragma once
// Inference trace types and the remaining-class set.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eex/tensor.hpp"

namespace eex {

/// Set of class indices in [0, M) that have not been excluded.
class RemainingSet {
 public:
  RemainingSet() = default;

  static RemainingSet all(std::size_t num_classes) {
    RemainingSet s;
    s.in_.assign(num_classes, true);
    s.count_ = num_classes;
    return s;
  }

  static RemainingSet of(std::size_t num_classes, const std::vector<std::size_t>& members) {
    RemainingSet s;
    s.in_.assign(num_classes, false);
    for (auto m : members) s.insert(m);
    return s;
  }

  std::size_t universe() const noexcept { return in_.size(); }
  std::size_t size() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }

  bool contains(std::size_t c) const { return c < in_.size() && in_[c]; }

  void insert(std::size_t c) {
    if (c >= in_.size()) throw ContractError("class " + std::to_string(c) + " outside the class range");
    if (!in_[c]) {
      in_[c] = true;
      ++count_;
    }
  }

  void erase(std::size_t c) {
    if (contains(c)) {
      in_[c] = false;
      --count_;
    }
  }

  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < in_.size(); ++i)
      if (in_[i]) out.push_back(i);
    return out;
  }

  bool subset_of(const RemainingSet& o) const {
    for (std::size_t i = 0; i < in_.size(); ++i)
      if (in_[i] && !o.contains(i)) return false;
    return true;
  }

  friend bool operator==(const RemainingSet&, const RemainingSet&) = default;

 private:
  std::vector<bool> in_;
  std::size_t count_ = 0;
};

enum class Engine { class_exclusion, confidence };
enum class ExitReason { single_class, final_layer, confident };

inline const char* to_string(ExitReason r) {
  switch (r) {
    case ExitReason::single_class: return "single-class";
    case ExitReason::final_layer: return "final-layer";
    case ExitReason::confident: return "confident";
  }
  return "?";
}

inline const char* to_string(Engine e) { return e == Engine::class_exclusion ? "class-exclusion" : "confidence"; }

/// What happened at one visited exit point.
struct ExitRecord {
  std::size_t exit = 0;                  // 1-based
  std::vector<double> probs;             // exclusion probs, or classifier softmax for the baseline
  double max_prob = 0.0;                 // threshold anchor x
  std::optional<std::size_t> recovered;
  std::vector<std::size_t> excluded;     // removed at this exit
  std::vector<std::size_t> remaining;    // after this exit

  friend bool operator==(const ExitRecord&, const ExitRecord&) = default;
};

struct InferenceTrace {
  Engine engine = Engine::class_exclusion;
  std::vector<ExitRecord> exits;
  std::size_t exit_layer = 0;  // 1-based exit where inference stopped
  std::size_t predicted_class = 0;
  ExitReason reason = ExitReason::final_layer;
  std::uint64_t flops = 0;
  std::uint64_t macs = 0;
  std::optional<std::size_t> label;

  friend bool operator==(const InferenceTrace&, const InferenceTrace&) = default;
};

}  // namespace eex
