#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvla {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats. Value-semantic handle: copies
/// share storage. Operations never mutate their inputs; leaves (parameters)
/// may be updated in place between steps through values_mut().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const;
  bool requires_grad() const;

  std::span<const double> values() const;
  std::span<double> values_mut();
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  /// Sole element of a one-element tensor.
  double item() const;

  /// Storage identity, for aliasing checks in tests.
  const void* data_handle() const { return data_.get(); }

 private:
  struct Data {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values iff requires_grad
    bool requires_grad = false;
  };
  std::shared_ptr<Data> data_;
};

/// Ordered record of executed operations. backward() replays the record in
/// reverse, accumulating into the grad buffers of every tensor that requires
/// gradients, then clears the record. One tape per training step; a tape must
/// not be shared across threads.
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  void backward(const Tensor& loss);
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// ---- elementwise ----------------------------------------------------------
// Binary ops accept equal shapes or leading-axis broadcast: the smaller
// operand's shape must be a suffix of the larger's.
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& a, double factor, Tape* tape);
Tensor sigmoid(const Tensor& a, Tape* tape);
Tensor relu(const Tensor& a, Tape* tape);
Tensor exp(const Tensor& a, Tape* tape);
Tensor log(const Tensor& a, Tape* tape);  // rejects non-positive inputs

// ---- shape ----------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape, Tape* tape);
Tensor transpose(const Tensor& a, Tape* tape);  // 2-D only
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows,
                   Tape* tape);

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);

// ---- normalization / reductions -------------------------------------------
Tensor softmax(const Tensor& a, std::size_t axis, Tape* tape);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps, Tape* tape);

Tensor reduce_sum(const Tensor& a, std::optional<std::size_t> axis, Tape* tape);
Tensor reduce_mean(const Tensor& a, std::optional<std::size_t> axis,
                   Tape* tape);

struct MaxReduce {
  Tensor values;
  // Flat index of the first maximum when no axis is given; otherwise the
  // index along the reduced axis, one entry per output element. Ties break
  // to the lowest index.
  std::vector<std::size_t> argmax;
};
MaxReduce reduce_max(const Tensor& a, std::optional<std::size_t> axis,
                     Tape* tape);

// ---- structured ops -------------------------------------------------------

/// 2-D convolution over a [C_in, H, W] input with [C_out, C_in, kh, kw]
/// weights, zero padding, floor output size.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad, Tape* tape);

/// [C, h, w] -> [(h*w), C]; row r holds grid cell (r / w, r % w).
Tensor to_patch_matrix(const Tensor& chw, Tape* tape);

struct AttentionResult {
  Tensor output;   // [n_q, d_v]
  Tensor weights;  // [n_q, n_k] softmax rows; detached snapshot
};

/// Scaled dot-product attention. With order_invariant_keys, reductions over
/// the key axis use value-sorted summation, so the forward result is a
/// function of the key multiset only — required for bitwise query-permutation
/// equivariance when keys are the queries themselves.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, double scale,
                                     bool order_invariant_keys, Tape* tape);

/// Mean of numerically stable per-element binary cross-entropy on logits.
/// Empty input yields an exact scalar zero.
Tensor bce_with_logits_mean(const Tensor& logits,
                            const std::vector<double>& targets, Tape* tape);

struct ContrastEntry {
  std::size_t row;                     // row of the prediction matrix
  std::size_t positive;                // row of the bank
  std::vector<std::size_t> negatives;  // rows of the bank, distinct
};

/// Contrastive position loss on un-normalized inner products against a fixed
/// bank. Per entry: r = e^{<p,b+>} / (e^{<p,b+>} + sum_u e^{<p,b-_u>}).
/// take_log averages -log r; otherwise averages -r. Empty entry list yields
/// an exact scalar zero. The bank never receives gradients.
Tensor position_contrast_mean(const Tensor& preds, const Tensor& bank,
                              const std::vector<ContrastEntry>& entries,
                              bool take_log, Tape* tape);

// ---- verification ---------------------------------------------------------

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |central|, 1e-8), for a scalar-valued builder f that
/// constructs its result from x through taped ops.
double finite_diff_check(
    const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
    double eps = 1e-5);

/// Same check for a parameter embedded in a larger model: build_loss must
/// re-run the forward pass (recording on the given tape when non-null).
/// The parameter is perturbed in place and restored.
double param_finite_diff_check(Tensor param,
                               const std::function<Tensor(Tape*)>& build_loss,
                               double eps = 1e-5);

}  // namespace kvla
