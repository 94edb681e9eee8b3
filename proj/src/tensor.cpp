#include "cmreg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cmreg::ad {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

MatMap map2(Var t, int rows, int cols) { return MatMap(t->val.data(), rows, cols); }
CMatMap cmap2(const Var& t, int rows, int cols) {
  return CMatMap(t->val.data(), rows, cols);
}
MatMap gmap2(const Var& t, int rows, int cols) {
  return MatMap(t->grad.data(), rows, cols);
}

[[noreturn]] void shape_error(const char* op, const Var& a, const Var& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a->shape) + " vs " + shape_str(b->shape));
}

void require_rank2(const char* op, const Var& a) {
  if (a->shape.size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_str(a->shape));
}

}  // namespace

Var make_var(std::vector<int> shape) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->val.assign(t->size(), 0.0f);
  return t;
}

Var make_var(std::vector<int> shape, std::vector<float> values) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  if (static_cast<int64_t>(values.size()) != t->size())
    throw std::invalid_argument("make_var: value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(t->shape));
  t->val = std::move(values);
  return t;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "{";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "}";
}

Var Graph::matmul(const Var& a, const Var& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a->shape[1] != b->shape[0]) shape_error("matmul", a, b);
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  Var y = output({m, n});
  // product sources are copied into Eigen-owned (aligned) storage first:
  // Eigen's product kernels are only bit-reproducible when the source
  // operands have a fixed alignment, and raw heap buffers do not
  {
    const Mat am = cmap2(a, m, k);
    const Mat bm = cmap2(b, k, n);
    map2(y, m, n).noalias() = am * bm;
  }
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y, m, k, n] {
      const Mat am = cmap2(a, m, k);
      const Mat bm = cmap2(b, k, n);
      const Mat gym = CMatMap(y->grad.data(), m, n);
      gmap2(a, m, k).noalias() += gym * bm.transpose();
      gmap2(b, k, n).noalias() += am.transpose() * gym;
    });
  }
  return y;
}

Var Graph::add(const Var& a, const Var& b) {
  const bool bias = a->shape.size() == 2 && b->shape.size() == 1 &&
                    a->shape[1] == b->shape[0];
  if (!bias && a->shape != b->shape) shape_error("add", a, b);
  Var y = output(a->shape);
  if (bias) {
    const int r = a->shape[0], c = a->shape[1];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) y->val[i * c + j] = a->val[i * c + j] + b->val[j];
  } else {
    for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] + b->val[i];
  }
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y, bias] {
      for (size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i];
      if (bias) {
        const int r = a->shape[0], c = a->shape[1];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) b->grad[j] += y->grad[i * c + j];
      } else {
        for (size_t i = 0; i < y->grad.size(); ++i) b->grad[i] += y->grad[i];
      }
    });
  }
  return y;
}

Var Graph::sub(const Var& a, const Var& b) {
  if (a->shape != b->shape) shape_error("sub", a, b);
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] - b->val[i];
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) {
        a->grad[i] += y->grad[i];
        b->grad[i] -= y->grad[i];
      }
    });
  }
  return y;
}

Var Graph::mul(const Var& a, const Var& b) {
  if (a->shape != b->shape) shape_error("mul", a, b);
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] * b->val[i];
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) {
        a->grad[i] += y->grad[i] * b->val[i];
        b->grad[i] += y->grad[i] * a->val[i];
      }
    });
  }
  return y;
}

Var Graph::scale(const Var& a, float c) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] * c;
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, c] {
      for (size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i] * c;
    });
  }
  return y;
}

Var Graph::add_const(const Var& a, float c) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] + c;
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i];
    });
  }
  return y;
}

Var Graph::relu(const Var& a) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = a->val[i] > 0.0f ? a->val[i] : 0.0f;
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < y->grad.size(); ++i)
        if (a->val[i] > 0.0f) a->grad[i] += y->grad[i];
    });
  }
  return y;
}

Var Graph::leaky_relu(const Var& a, float alpha) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i)
    y->val[i] = a->val[i] > 0.0f ? a->val[i] : alpha * a->val[i];
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, alpha] {
      for (size_t i = 0; i < y->grad.size(); ++i)
        a->grad[i] += y->grad[i] * (a->val[i] > 0.0f ? 1.0f : alpha);
    });
  }
  return y;
}

Var Graph::sigmoid(const Var& a) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = 1.0f / (1.0f + std::exp(-a->val[i]));
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < y->grad.size(); ++i)
        a->grad[i] += y->grad[i] * y->val[i] * (1.0f - y->val[i]);
    });
  }
  return y;
}

Var Graph::exp(const Var& a) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = std::exp(a->val[i]);
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i] * y->val[i];
    });
  }
  return y;
}

Var Graph::log(const Var& a) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = std::log(a->val[i]);
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i] / a->val[i];
    });
  }
  return y;
}

Var Graph::softmax_rows(const Var& a) {
  require_rank2("softmax_rows", a);
  const int r = a->shape[0], c = a->shape[1];
  Var y = output(a->shape);
  for (int i = 0; i < r; ++i) {
    const float* x = a->val.data() + static_cast<size_t>(i) * c;
    float* p = y->val.data() + static_cast<size_t>(i) * c;
    const float mx = *std::max_element(x, x + c);
    float z = 0.0f;
    for (int j = 0; j < c; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < c; ++j) p[j] /= z;
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, r, c] {
      for (int i = 0; i < r; ++i) {
        const float* p = y->val.data() + static_cast<size_t>(i) * c;
        const float* gy = y->grad.data() + static_cast<size_t>(i) * c;
        float* gx = a->grad.data() + static_cast<size_t>(i) * c;
        float dot = 0.0f;
        for (int j = 0; j < c; ++j) dot += p[j] * gy[j];
        for (int j = 0; j < c; ++j) gx[j] += p[j] * (gy[j] - dot);
      }
    });
  }
  return y;
}

Var Graph::log_softmax_rows(const Var& a) {
  require_rank2("log_softmax_rows", a);
  const int r = a->shape[0], c = a->shape[1];
  Var y = output(a->shape);
  for (int i = 0; i < r; ++i) {
    const float* x = a->val.data() + static_cast<size_t>(i) * c;
    float* o = y->val.data() + static_cast<size_t>(i) * c;
    const float mx = *std::max_element(x, x + c);
    float z = 0.0f;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const float lz = std::log(z) + mx;
    for (int j = 0; j < c; ++j) o[j] = x[j] - lz;
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, r, c] {
      for (int i = 0; i < r; ++i) {
        const float* o = y->val.data() + static_cast<size_t>(i) * c;
        const float* gy = y->grad.data() + static_cast<size_t>(i) * c;
        float* gx = a->grad.data() + static_cast<size_t>(i) * c;
        float gsum = 0.0f;
        for (int j = 0; j < c; ++j) gsum += gy[j];
        for (int j = 0; j < c; ++j) gx[j] += gy[j] - std::exp(o[j]) * gsum;
      }
    });
  }
  return y;
}

Var Graph::sum_all(const Var& a) {
  Var y = output({1});
  double acc = 0.0;
  for (float v : a->val) acc += v;
  y->val[0] = static_cast<float>(acc);
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += y->grad[0];
    });
  }
  return y;
}

Var Graph::mean_all(const Var& a) {
  const float inv = 1.0f / static_cast<float>(a->size());
  return scale(sum_all(a), inv);
}

Var Graph::row_sum(const Var& a) {
  require_rank2("row_sum", a);
  const int r = a->shape[0], c = a->shape[1];
  Var y = output({r});
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += a->val[static_cast<size_t>(i) * c + j];
    y->val[i] = static_cast<float>(acc);
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, r, c] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) a->grad[static_cast<size_t>(i) * c + j] += y->grad[i];
    });
  }
  return y;
}

Var Graph::col_max(const Var& a) {
  require_rank2("col_max", a);
  const int r = a->shape[0], c = a->shape[1];
  if (r == 0) throw std::invalid_argument("col_max: empty input");
  Var y = output({c});
  auto argmax = std::make_shared<std::vector<int>>(c, 0);
  for (int j = 0; j < c; ++j) y->val[j] = a->val[j];
  for (int i = 1; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      const float v = a->val[static_cast<size_t>(i) * c + j];
      if (v > y->val[j]) {
        y->val[j] = v;
        (*argmax)[j] = i;
      }
    }
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, argmax, c] {
      for (int j = 0; j < c; ++j)
        a->grad[static_cast<size_t>((*argmax)[j]) * c + j] += y->grad[j];
    });
  }
  return y;
}

Var Graph::col_mean(const Var& a) {
  require_rank2("col_mean", a);
  const int r = a->shape[0], c = a->shape[1];
  if (r == 0) throw std::invalid_argument("col_mean: empty input");
  Var y = output({c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y->val[j] += a->val[static_cast<size_t>(i) * c + j];
  const float inv = 1.0f / static_cast<float>(r);
  for (int j = 0; j < c; ++j) y->val[j] *= inv;
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, r, c, inv] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          a->grad[static_cast<size_t>(i) * c + j] += y->grad[j] * inv;
    });
  }
  return y;
}

namespace {

// im2col for a 3x3 kernel with pad 1: col is {Ci*9, Ho*Wo}.
void im2col_3x3(const float* x, int ci, int h, int w, int stride, int ho, int wo,
                float* col) {
  const int64_t opix = static_cast<int64_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    const float* plane = x + static_cast<int64_t>(c) * h * w;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        float* row = col + (static_cast<int64_t>(c) * 9 + (dy + 1) * 3 + (dx + 1)) * opix;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy;
          float* dst = row + static_cast<int64_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_3x3_add(const float* col, int ci, int h, int w, int stride, int ho, int wo,
                    float* gx) {
  const int64_t opix = static_cast<int64_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    float* plane = gx + static_cast<int64_t>(c) * h * w;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const float* row = col + (static_cast<int64_t>(c) * 9 + (dy + 1) * 3 + (dx + 1)) * opix;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + static_cast<int64_t>(oy) * wo;
          float* dst = plane + static_cast<int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var Graph::conv2d_3x3(const Var& x, const Var& w, const Var& b, int stride) {
  if (x->shape.size() != 3)
    throw std::invalid_argument("conv2d_3x3: input must be {C,H,W}, got " + shape_str(x->shape));
  if (w->shape.size() != 4 || w->shape[2] != 3 || w->shape[3] != 3)
    throw std::invalid_argument("conv2d_3x3: weights must be {Co,Ci,3,3}, got " + shape_str(w->shape));
  if (w->shape[1] != x->shape[0]) shape_error("conv2d_3x3", w, x);
  const int ci = x->shape[0], h = x->shape[1], ww = x->shape[2];
  const int co = w->shape[0];
  if (b->shape != std::vector<int>{co}) shape_error("conv2d_3x3(bias)", b, w);
  const int ho = (h - 1) / stride + 1;
  const int wo = (ww - 1) / stride + 1;
  const int64_t opix = static_cast<int64_t>(ho) * wo;

  // the im2col buffer lives in Eigen-owned (aligned) storage and small
  // operands are copied likewise: Eigen's product kernels are only
  // bit-reproducible when the source operands have a fixed alignment
  auto col = std::make_shared<Mat>(ci * 9, opix);
  im2col_3x3(x->val.data(), ci, h, ww, stride, ho, wo, col->data());

  Var y = output({co, ho, wo});
  {
    const Mat wm = CMatMap(w->val.data(), co, ci * 9);
    MatMap ym(y->val.data(), co, opix);
    ym.noalias() = wm * (*col);
    for (int o = 0; o < co; ++o) ym.row(o).array() += b->val[o];
  }
  if (record_) {
    x->ensure_grad();
    w->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([x, w, b, y, col, ci, h, ww, stride, ho, wo, co, opix] {
      const Mat gym = CMatMap(y->grad.data(), co, opix);
      MatMap gwm(w->grad.data(), co, ci * 9);
      gwm.noalias() += gym * col->transpose();
      // fixed-order scalar reduction: Eigen's vectorized sum peels a prologue
      // that depends on the heap buffer's alignment, which would make the
      // last-ulp bits of the bias gradient vary between allocations
      for (int o = 0; o < co; ++o) {
        const float* gy = y->grad.data() + static_cast<size_t>(o) * opix;
        float s = 0.0f;
        for (int64_t j = 0; j < opix; ++j) s += gy[j];
        b->grad[o] += s;
      }
      const Mat wm = CMatMap(w->val.data(), co, ci * 9);
      Mat gcm(ci * 9, opix);
      gcm.noalias() = wm.transpose() * gym;
      col2im_3x3_add(gcm.data(), ci, h, ww, stride, ho, wo, x->grad.data());
    });
  }
  return y;
}

Var Graph::concat_cols(const Var& a, const Var& b) {
  require_rank2("concat_cols", a);
  require_rank2("concat_cols", b);
  if (a->shape[0] != b->shape[0]) shape_error("concat_cols", a, b);
  const int r = a->shape[0], ca = a->shape[1], cb = b->shape[1];
  Var y = output({r, ca + cb});
  for (int i = 0; i < r; ++i) {
    std::memcpy(y->val.data() + static_cast<size_t>(i) * (ca + cb),
                a->val.data() + static_cast<size_t>(i) * ca, ca * sizeof(float));
    std::memcpy(y->val.data() + static_cast<size_t>(i) * (ca + cb) + ca,
                b->val.data() + static_cast<size_t>(i) * cb, cb * sizeof(float));
  }
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y, r, ca, cb] {
      for (int i = 0; i < r; ++i) {
        const float* gy = y->grad.data() + static_cast<size_t>(i) * (ca + cb);
        float* ga = a->grad.data() + static_cast<size_t>(i) * ca;
        float* gb = b->grad.data() + static_cast<size_t>(i) * cb;
        for (int j = 0; j < ca; ++j) ga[j] += gy[j];
        for (int j = 0; j < cb; ++j) gb[j] += gy[ca + j];
      }
    });
  }
  return y;
}

Var Graph::concat_vec(const Var& a, const Var& b) {
  if (a->shape.size() != 1 || b->shape.size() != 1)
    throw std::invalid_argument("concat_vec: expected rank-1 tensors, got " +
                                shape_str(a->shape) + " and " + shape_str(b->shape));
  const int na = a->shape[0], nb = b->shape[0];
  Var y = output({na + nb});
  std::memcpy(y->val.data(), a->val.data(), na * sizeof(float));
  std::memcpy(y->val.data() + na, b->val.data(), nb * sizeof(float));
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y, na, nb] {
      for (int i = 0; i < na; ++i) a->grad[i] += y->grad[i];
      for (int i = 0; i < nb; ++i) b->grad[i] += y->grad[na + i];
    });
  }
  return y;
}

Var Graph::l2_normalize_rows(const Var& a) {
  require_rank2("l2_normalize_rows", a);
  const int r = a->shape[0], c = a->shape[1];
  Var y = output(a->shape);
  auto norms = std::make_shared<std::vector<float>>(r);
  for (int i = 0; i < r; ++i) {
    const float* x = a->val.data() + static_cast<size_t>(i) * c;
    float* o = y->val.data() + static_cast<size_t>(i) * c;
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += static_cast<double>(x[j]) * x[j];
    const float n = static_cast<float>(std::sqrt(s + 1e-12));
    (*norms)[i] = n;
    for (int j = 0; j < c; ++j) o[j] = x[j] / n;
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, norms, r, c] {
      for (int i = 0; i < r; ++i) {
        const float* o = y->val.data() + static_cast<size_t>(i) * c;
        const float* gy = y->grad.data() + static_cast<size_t>(i) * c;
        float* gx = a->grad.data() + static_cast<size_t>(i) * c;
        float dot = 0.0f;
        for (int j = 0; j < c; ++j) dot += o[j] * gy[j];
        const float inv = 1.0f / (*norms)[i];
        for (int j = 0; j < c; ++j) gx[j] += (gy[j] - o[j] * dot) * inv;
      }
    });
  }
  return y;
}

Var Graph::chw_to_nc(const Var& a) {
  if (a->shape.size() != 3)
    throw std::invalid_argument("chw_to_nc: input must be {C,H,W}, got " + shape_str(a->shape));
  const int c = a->shape[0];
  const int64_t n = static_cast<int64_t>(a->shape[1]) * a->shape[2];
  Var y = output({static_cast<int>(n), c});
  for (int ch = 0; ch < c; ++ch)
    for (int64_t p = 0; p < n; ++p) y->val[p * c + ch] = a->val[ch * n + p];
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, c, n] {
      for (int ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < n; ++p) a->grad[ch * n + p] += y->grad[p * c + ch];
    });
  }
  return y;
}

Var Graph::take_rows(const Var& a, std::vector<int> idx) {
  require_rank2("take_rows", a);
  const int r = a->shape[0], c = a->shape[1];
  const int n = static_cast<int>(idx.size());
  Var y = output({n, c});
  for (int i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= r)
      throw std::invalid_argument("take_rows: row index out of range");
    std::copy_n(a->val.data() + static_cast<size_t>(idx[i]) * c, c,
                y->val.data() + static_cast<size_t>(i) * c);
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    record_backward([a, y, ix, c] {
      for (size_t i = 0; i < ix->size(); ++i) {
        const float* gy = y->grad.data() + i * c;
        float* ga = a->grad.data() + static_cast<size_t>((*ix)[i]) * c;
        for (int j = 0; j < c; ++j) ga[j] += gy[j];
      }
    });
  }
  return y;
}

Var Graph::gather_rows(const Var& a, std::vector<int> idx) {
  require_rank2("gather_rows", a);
  const int r = a->shape[0], c = a->shape[1];
  if (static_cast<int>(idx.size()) != r)
    throw std::invalid_argument("gather_rows: index count " + std::to_string(idx.size()) +
                                " does not match rows of " + shape_str(a->shape));
  Var y = output({r});
  for (int i = 0; i < r; ++i) {
    if (idx[i] < 0 || idx[i] >= c)
      throw std::invalid_argument("gather_rows: index out of range");
    y->val[i] = a->val[static_cast<size_t>(i) * c + idx[i]];
  }
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    record_backward([a, y, ix, r, c] {
      for (int i = 0; i < r; ++i)
        a->grad[static_cast<size_t>(i) * c + (*ix)[i]] += y->grad[i];
    });
  }
  return y;
}

Var Graph::reshape(const Var& a, std::vector<int> shape) {
  Var y = output(std::move(shape));
  if (y->size() != a->size())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(a->shape) + " -> " +
                                shape_str(y->shape));
  y->val = a->val;
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y] {
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += y->grad[i];
    });
  }
  return y;
}

Var Graph::min_elem(const Var& a, const Var& b) {
  if (a->shape != b->shape) shape_error("min_elem", a, b);
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = std::min(a->val[i], b->val[i]);
  if (record_) {
    a->ensure_grad();
    b->ensure_grad();
    y->ensure_grad();
    record_backward([a, b, y] {
      for (size_t i = 0; i < y->grad.size(); ++i) {
        if (a->val[i] <= b->val[i])
          a->grad[i] += y->grad[i];
        else
          b->grad[i] += y->grad[i];
      }
    });
  }
  return y;
}

Var Graph::clamp(const Var& a, float lo, float hi) {
  Var y = output(a->shape);
  for (size_t i = 0; i < y->val.size(); ++i) y->val[i] = std::clamp(a->val[i], lo, hi);
  if (record_) {
    a->ensure_grad();
    y->ensure_grad();
    record_backward([a, y, lo, hi] {
      for (size_t i = 0; i < y->grad.size(); ++i)
        if (a->val[i] > lo && a->val[i] < hi) a->grad[i] += y->grad[i];
    });
  }
  return y;
}

Var Graph::output(std::vector<int> shape) {
  Var y = make_var(std::move(shape));
  track_output(y);
  return y;
}

void Graph::backward(const Var& loss) {
  if (loss->size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss->shape));
  for (const Var& y : outputs_) y->zero_grad();
  loss->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

// --- ParameterStore --------------------------------------------------------

Var ParameterStore::create(const std::string& name, std::vector<int> shape) {
  if (slots_.count(name))
    throw std::invalid_argument("parameter store: duplicate name '" + name + "'");
  Slot slot;
  slot.param = make_var(std::move(shape));
  slot.m.assign(slot.param->val.size(), 0.0f);
  slot.v.assign(slot.param->val.size(), 0.0f);
  order_.push_back(name);
  auto var = slot.param;
  slots_.emplace(name, std::move(slot));
  return var;
}

Var ParameterStore::get(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end())
    throw std::invalid_argument("parameter store: unknown name '" + name + "'");
  return it->second.param;
}

int64_t ParameterStore::total_size() const {
  int64_t n = 0;
  for (const auto& name : order_) n += slots_.at(name).param->size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& name : order_) slots_.at(name).param->zero_grad();
}

void ParameterStore::adam_step(float lr,
                               const std::function<bool(const std::string&)>& filter) {
  for (const auto& name : order_) {
    if (filter && !filter(name)) continue;
    Slot& s = slots_.at(name);
    if (s.param->grad.empty()) continue;
    s.t += 1;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(s.t));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(s.t));
    float* p = s.param->val.data();
    const float* g = s.param->grad.data();
    for (size_t i = 0; i < s.param->val.size(); ++i) {
      s.m[i] = beta1 * s.m[i] + (1.0f - beta1) * g[i];
      s.v[i] = beta2 * s.v[i] + (1.0f - beta2) * g[i] * g[i];
      const float mhat = s.m[i] / bc1;
      const float vhat = s.v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

namespace {
constexpr char kCkptMagic[8] = {'C', 'M', 'R', 'C', 'K', 'P', '0', '1'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void wput(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T rget(std::ifstream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
}  // namespace

void ParameterStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kCkptMagic, sizeof(kCkptMagic));
  wput(out, kCkptVersion);
  wput(out, static_cast<uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const Slot& s = slots_.at(name);
    wput(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), name.size());
    wput(out, static_cast<uint32_t>(s.param->shape.size()));
    for (int d : s.param->shape) wput(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(s.param->val.data()),
              s.param->val.size() * sizeof(float));
    wput(out, s.t);
    out.write(reinterpret_cast<const char*>(s.m.data()), s.m.size() * sizeof(float));
    out.write(reinterpret_cast<const char*>(s.v.data()), s.v.size() * sizeof(float));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

void ParameterStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const uint32_t version = rget<uint32_t>(in);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = rget<uint32_t>(in);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = rget<uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const uint32_t ndim = rget<uint32_t>(in);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(rget<uint32_t>(in));
    auto it = slots_.find(name);
    if (it == slots_.end())
      throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
    Slot& s = it->second;
    if (s.param->shape != shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               shape_str(shape) + " vs store " + shape_str(s.param->shape));
    in.read(reinterpret_cast<char*>(s.param->val.data()),
            s.param->val.size() * sizeof(float));
    s.t = rget<int64_t>(in);
    in.read(reinterpret_cast<char*>(s.m.data()), s.m.size() * sizeof(float));
    in.read(reinterpret_cast<char*>(s.v.data()), s.v.size() * sizeof(float));
    if (!in) throw std::runtime_error("checkpoint: truncated parameter '" + name + "'");
  }
}

}  // namespace cmreg::ad
