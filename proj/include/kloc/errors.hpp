#pragma once

#include <stdexcept>
#include <string>

namespace kloc {

/// Single exception type for the whole lab; the kind tag mirrors the
/// failure categories of the public contracts (shape mismatch, numeric
/// blowup, bad vocabulary id, ...).
class Error : public std::runtime_error {
 public:
  enum class Kind {
    Shape,
    Numeric,
    Index,
    Graph,
    Vocab,
    Template,
    Generation,
    Split,
    Span,
    Intervention,
    Spec,
    Training,
    OptimizationStall,
    Conditioning,
    Evaluation,
    Report,
    Pipeline,
    Checkpoint,
  };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

[[noreturn]] inline void fail(Error::Kind kind, const std::string& msg) {
  throw Error(kind, msg);
}

// Callers on hot paths must not build the message eagerly; pass a literal or
// guard the call so the string only materializes on failure.
inline void require(bool cond, Error::Kind kind, const char* msg) {
  if (!cond) fail(kind, msg);
}

inline void require(bool cond, Error::Kind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace kloc
