#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmreg::ad {

// Dense 32-bit float tensor with a lazily allocated gradient buffer.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> val;
  std::vector<float> grad;  // empty until ensure_grad()

  int64_t size() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), 0.0f);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
  }
};

using Var = std::shared_ptr<Tensor>;

Var make_var(std::vector<int> shape);
Var make_var(std::vector<int> shape, std::vector<float> values);
std::string shape_str(const std::vector<int>& shape);

// Define-by-run reverse-mode graph. Each op computes its value eagerly and,
// when recording, pushes a closure that accumulates input gradients. A graph
// is confined to one thread; independent graphs may run concurrently.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  Var matmul(const Var& a, const Var& b);             // {m,k} x {k,n}
  Var add(const Var& a, const Var& b);                // same shape, or {R,C}+{C}
  Var sub(const Var& a, const Var& b);
  Var mul(const Var& a, const Var& b);                // elementwise
  Var scale(const Var& a, float c);
  Var add_const(const Var& a, float c);
  Var relu(const Var& a);
  Var leaky_relu(const Var& a, float alpha = 0.01f);
  Var sigmoid(const Var& a);
  Var exp(const Var& a);
  Var log(const Var& a);
  Var softmax_rows(const Var& a);                     // {R,C}, softmax per row
  Var log_softmax_rows(const Var& a);
  Var sum_all(const Var& a);                          // -> {1}
  Var mean_all(const Var& a);                         // -> {1}
  Var row_sum(const Var& a);                          // {R,C} -> {R}
  Var col_max(const Var& a);                          // {R,C} -> {C}, max over rows
  Var col_mean(const Var& a);                         // {R,C} -> {C}
  Var conv2d_3x3(const Var& x, const Var& w, const Var& b, int stride = 1);
  Var concat_cols(const Var& a, const Var& b);        // {R,Ca}|{R,Cb} -> {R,Ca+Cb}
  Var concat_vec(const Var& a, const Var& b);         // {A}|{B} -> {A+B}
  Var l2_normalize_rows(const Var& a);                // unit-norm rows
  Var chw_to_nc(const Var& a);                        // {C,H,W} -> {H*W,C}
  Var gather_rows(const Var& a, std::vector<int> idx);  // y_r = a[r, idx_r]
  Var take_rows(const Var& a, std::vector<int> idx);    // y_i = a[idx_i, :]
  Var reshape(const Var& a, std::vector<int> shape);
  Var min_elem(const Var& a, const Var& b);
  Var clamp(const Var& a, float lo, float hi);

  // hooks for composite ops with hand-written backward passes
  bool recording() const { return record_; }
  void record_backward(std::function<void()> fn) {
    if (record_) tape_.push_back(std::move(fn));
  }
  // Composite ops must register their outputs so repeated backward calls
  // reset intermediate gradients instead of compounding them.
  void track_output(const Var& y) {
    if (record_) outputs_.push_back(y);
  }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients of
  // graph-internal nodes are recomputed from scratch on every call, so leaf
  // gradients accumulate exactly once per call. Throws unless loss is scalar.
  void backward(const Var& loss);

 private:
  Var output(std::vector<int> shape);  // make_var + track_output

  bool record_;
  std::vector<std::function<void()>> tape_;
  std::vector<Var> outputs_;
};

// Named parameters with per-parameter Adam moment buffers.
class ParameterStore {
 public:
  float beta1 = 0.98f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  Var create(const std::string& name, std::vector<int> shape);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const { return slots_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  int64_t total_size() const;

  void zero_grad();
  // Adam with bias correction; `filter`, when set, restricts the update to
  // matching parameter names (per-parameter step counters stay consistent).
  void adam_step(float lr,
                 const std::function<bool(const std::string&)>& filter = {});

  // Versioned binary checkpoint: name -> shape -> raw values + Adam state.
  // load() requires every stored parameter to already exist with a matching
  // shape and copies in place.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  struct Slot {
    Var param;
    std::vector<float> m, v;
    int64_t t = 0;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace cmreg::ad
