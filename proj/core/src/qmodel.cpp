#include "saap/qmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "saap/tensor_io.hpp"

namespace saap {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kLogFloor = 1e-12;

Mat mat_from_tensor(const TensorBlock& t) {
    Mat m(t.rows, t.dim);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        m.data[i] = static_cast<double>(t.data[i]);
    }
    return m;
}

// a(n x k) * b(k x m)
Mat mm(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("mm: inner dims " + std::to_string(a.cols) + " vs " +
                                    std::to_string(b.rows));
    }
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* or_ = out.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            double av = ar[k];
            if (av == 0.0) {
                continue;
            }
            const double* br = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                or_[j] += av * br[j];
            }
        }
    }
    return out;
}

// a(n x k)^T * b(n x m) -> k x m
Mat mm_at_b(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) {
        throw std::invalid_argument("mm_at_b: row counts differ");
    }
    Mat out(a.cols, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        const double* br = b.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            double av = ar[k];
            if (av == 0.0) {
                continue;
            }
            double* or_ = out.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                or_[j] += av * br[j];
            }
        }
    }
    return out;
}

// a(n x k) * b(m x k)^T -> n x m
Mat mm_a_bt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) {
        throw std::invalid_argument("mm_a_bt: col counts differ");
    }
    Mat out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* or_ = out.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                s += ar[k] * br[k];
            }
            or_[j] = s;
        }
    }
    return out;
}

Mat col_sums(const Mat& a) {
    Mat out(1, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* r = a.row(i);
        for (std::size_t j = 0; j < a.cols; ++j) {
            out.data[j] += r[j];
        }
    }
    return out;
}

void softmax_rows_inplace(Mat& logits) {
    for (std::size_t i = 0; i < logits.rows; ++i) {
        double* r = logits.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < logits.cols; ++j) {
            mx = std::max(mx, r[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            total += r[j];
        }
        double inv = 1.0 / total;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            r[j] *= inv;
        }
    }
}

struct ForwardCache {
    Mat x;    // n x d
    Mat xhat; // n x h, normalized pre-scale
    Mat y;    // n x h, post-BN pre-ReLU
    Mat r;    // n x h, post-ReLU
    Mat p;    // n x C, softmax rows
    std::vector<double> batch_mean; // h, train mode only
    std::vector<double> batch_var;  // h, biased
};

void check_input(const QModel& model, const TensorBlock& queries) {
    if (queries.dim != model.dim()) {
        throw std::invalid_argument("qmodel: query dim " + std::to_string(queries.dim) +
                                    " does not match model dim " + std::to_string(model.dim()));
    }
    if (queries.rows == 0) {
        throw std::invalid_argument("qmodel: empty query batch");
    }
}

ForwardCache forward_pass(const QModel& model, const TensorBlock& queries, ForwardMode mode) {
    check_input(model, queries);
    if (mode == ForwardMode::train && queries.rows < 2) {
        throw std::invalid_argument("qmodel: train-mode forward needs >= 2 rows for batch stats");
    }

    const std::size_t n = queries.rows;
    const std::size_t h = model.hidden();

    ForwardCache c;
    c.x = mat_from_tensor(queries);

    Mat z = mm(c.x, model.w1);
    for (std::size_t i = 0; i < n; ++i) {
        double* r = z.row(i);
        for (std::size_t j = 0; j < h; ++j) {
            r[j] += model.b1.data[j];
        }
    }

    std::vector<double> mean(h, 0.0), var(h, 0.0);
    if (mode == ForwardMode::train) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* r = z.row(i);
            for (std::size_t j = 0; j < h; ++j) {
                mean[j] += r[j];
            }
        }
        for (std::size_t j = 0; j < h; ++j) {
            mean[j] /= static_cast<double>(n);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* r = z.row(i);
            for (std::size_t j = 0; j < h; ++j) {
                double d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        for (std::size_t j = 0; j < h; ++j) {
            var[j] /= static_cast<double>(n);
        }
    } else {
        mean.assign(model.bn_run_mean.data.begin(), model.bn_run_mean.data.end());
        var.assign(model.bn_run_var.data.begin(), model.bn_run_var.data.end());
    }

    std::vector<double> inv_std(h);
    for (std::size_t j = 0; j < h; ++j) {
        inv_std[j] = 1.0 / std::sqrt(var[j] + kBnEps);
    }

    c.xhat = Mat(n, h);
    c.y = Mat(n, h);
    c.r = Mat(n, h);
    for (std::size_t i = 0; i < n; ++i) {
        const double* zr = z.row(i);
        double* xh = c.xhat.row(i);
        double* yr = c.y.row(i);
        double* rr = c.r.row(i);
        for (std::size_t j = 0; j < h; ++j) {
            xh[j] = (zr[j] - mean[j]) * inv_std[j];
            yr[j] = model.bn_gamma.data[j] * xh[j] + model.bn_beta.data[j];
            rr[j] = yr[j] > 0.0 ? yr[j] : 0.0;
        }
    }

    c.p = mm(c.r, model.w2);
    for (std::size_t i = 0; i < n; ++i) {
        double* r = c.p.row(i);
        for (std::size_t j = 0; j < model.n_buckets(); ++j) {
            r[j] += model.b2.data[j];
        }
    }
    softmax_rows_inplace(c.p);

    c.batch_mean = std::move(mean);
    c.batch_var = std::move(var);
    return c;
}

void update_running_stats(QModel& model, const ForwardCache& c, double bn_momentum) {
    const std::size_t h = model.hidden();
    for (std::size_t j = 0; j < h; ++j) {
        model.bn_run_mean.data[j] =
                bn_momentum * model.bn_run_mean.data[j] + (1.0 - bn_momentum) * c.batch_mean[j];
        model.bn_run_var.data[j] =
                bn_momentum * model.bn_run_var.data[j] + (1.0 - bn_momentum) * c.batch_var[j];
    }
}

double kl_from_cache(const Mat& p, const Mat& target) {
    if (p.rows != target.rows || p.cols != target.cols) {
        throw std::invalid_argument("kl_loss: pred " + shape_str(p.rows, p.cols) +
                                    " vs target " + shape_str(target.rows, target.cols));
    }
    if (p.rows == 0) {
        throw std::invalid_argument("kl_loss: empty inputs");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows; ++i) {
        const double* pr = p.row(i);
        const double* tr = target.row(i);
        for (std::size_t j = 0; j < p.cols; ++j) {
            double t = tr[j];
            if (t <= 0.0) {
                continue;
            }
            total += t * (std::log(t) - std::log(std::max(pr[j], kLogFloor)));
        }
    }
    return total / static_cast<double>(p.rows);
}

/// Backprop through softmax+KL, linear 2, ReLU, batch norm, linear 1.
void backward_pass(const QModel& model, const ForwardCache& c, const Mat& target, QGrads& g) {
    const std::size_t n = c.p.rows;
    const std::size_t h = model.hidden();
    const double inv_n = 1.0 / static_cast<double>(n);

    Mat dlogits(n, c.p.cols);
    for (std::size_t i = 0; i < dlogits.data.size(); ++i) {
        dlogits.data[i] = (c.p.data[i] - target.data[i]) * inv_n;
    }

    g.w2 = mm_at_b(c.r, dlogits);
    g.b2 = col_sums(dlogits);

    Mat dy = mm_a_bt(dlogits, model.w2); // n x h, still pre-ReLU mask
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        if (c.y.data[i] <= 0.0) {
            dy.data[i] = 0.0;
        }
    }

    g.bn_gamma = Mat(1, h);
    g.bn_beta = Mat(1, h);
    for (std::size_t i = 0; i < n; ++i) {
        const double* dyr = dy.row(i);
        const double* xh = c.xhat.row(i);
        for (std::size_t j = 0; j < h; ++j) {
            g.bn_gamma.data[j] += dyr[j] * xh[j];
            g.bn_beta.data[j] += dyr[j];
        }
    }

    Mat dz(n, h);
    for (std::size_t j = 0; j < h; ++j) {
        double scale = model.bn_gamma.data[j] / std::sqrt(c.batch_var[j] + kBnEps);
        double mean_dy = g.bn_beta.data[j] * inv_n;
        double mean_dy_xhat = g.bn_gamma.data[j] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
            dz.at(i, j) =
                    scale * (dy.at(i, j) - mean_dy - c.xhat.at(i, j) * mean_dy_xhat);
        }
    }

    g.w1 = mm_at_b(c.x, dz);
    g.b1 = col_sums(dz);
}

void adam_step(QModel& model, TrainerState& state, QGrads& grads) {
    auto params = param_refs(model);
    auto gs = param_refs(grads);
    if (state.m.empty()) {
        for (Mat* p : params) {
            state.m.emplace_back(p->rows, p->cols);
            state.v.emplace_back(p->rows, p->cols);
        }
    }
    state.step++;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Mat& p = *params[k];
        const Mat& g = *gs[k];
        Mat& m = state.m[k];
        Mat& v = state.v[k];
        if (g.rows != p.rows || g.cols != p.cols) {
            throw std::invalid_argument("adam_step: gradient shape mismatch");
        }
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

} // namespace

QModel qmodel_init(std::size_t dim, std::size_t hidden, std::size_t n_buckets, Rng& rng) {
    if (dim == 0 || hidden == 0 || n_buckets == 0) {
        throw std::invalid_argument("qmodel_init: zero dimension");
    }
    QModel m;
    m.w1 = Mat(dim, hidden);
    m.b1 = Mat(1, hidden);
    m.bn_gamma = Mat(1, hidden);
    m.bn_beta = Mat(1, hidden);
    m.bn_run_mean = Mat(1, hidden);
    m.bn_run_var = Mat(1, hidden);
    m.w2 = Mat(hidden, n_buckets);
    m.b2 = Mat(1, n_buckets);

    double s1 = std::sqrt(2.0 / static_cast<double>(dim));
    for (double& w : m.w1.data) {
        w = rng.normal() * s1;
    }
    double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
    for (double& w : m.w2.data) {
        w = rng.normal() * s2;
    }
    std::fill(m.bn_gamma.data.begin(), m.bn_gamma.data.end(), 1.0);
    std::fill(m.bn_run_var.data.begin(), m.bn_run_var.data.end(), 1.0);
    return m;
}

TensorBlock qmodel_forward(QModel& model, const TensorBlock& queries_deroped, ForwardMode mode,
                           double bn_momentum) {
    ForwardCache c = forward_pass(model, queries_deroped, mode);
    if (mode == ForwardMode::train) {
        update_running_stats(model, c, bn_momentum);
    }
    return c.p.to_tensor();
}

TensorBlock qmodel_forward(const QModel& model, const TensorBlock& queries_deroped) {
    return forward_pass(model, queries_deroped, ForwardMode::eval).p.to_tensor();
}

Mat attention_target_rows(const TensorBlock& queries_roped, const TensorBlock& keys_roped,
                          const KeyAssignment& assignment, std::size_t n_buckets) {
    if (keys_roped.rows == 0) {
        throw std::invalid_argument("attention_target: empty key set");
    }
    if (assignment.size() != keys_roped.rows) {
        throw std::invalid_argument("attention_target: assignment covers " +
                                    std::to_string(assignment.size()) + " keys, block has " +
                                    std::to_string(keys_roped.rows));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(queries_roped.dim));
    Mat a = matmul_scaled_d(queries_roped, keys_roped, scale);
    softmax_rows_inplace(a);
    Mat target(queries_roped.rows, n_buckets);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* tr = target.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            std::uint32_t b = assignment.bucket_of[k];
            if (b >= n_buckets) {
                throw std::invalid_argument("attention_target: bucket id out of range");
            }
            tr[b] += ar[k];
        }
    }
    return target;
}

TensorBlock attention_target(const TensorBlock& queries_roped, const TensorBlock& keys_roped,
                             const KeyAssignment& assignment, std::size_t n_buckets) {
    return attention_target_rows(queries_roped, keys_roped, assignment, n_buckets).to_tensor();
}

double kl_loss(const Mat& pred, const Mat& target) {
    return kl_from_cache(pred, target);
}

double kl_loss(const TensorBlock& pred, const TensorBlock& target) {
    return kl_from_cache(mat_from_tensor(pred), mat_from_tensor(target));
}

std::vector<Mat*> param_refs(QModel& model) {
    return {&model.w1, &model.b1, &model.bn_gamma, &model.bn_beta, &model.w2, &model.b2};
}

std::vector<Mat*> param_refs(QGrads& grads) {
    return {&grads.w1, &grads.b1, &grads.bn_gamma, &grads.bn_beta, &grads.w2, &grads.b2};
}

double qmodel_loss_and_grads(const QModel& model, const TensorBlock& queries_deroped,
                             const Mat& target, QGrads* grads) {
    ForwardCache c = forward_pass(model, queries_deroped, ForwardMode::train);
    double loss = kl_from_cache(c.p, target);
    if (grads != nullptr) {
        backward_pass(model, c, target, *grads);
    }
    return loss;
}

double train_step_on_target(QModel& model, TrainerState& state,
                            const TensorBlock& queries_deroped, const Mat& target) {
    ForwardCache c = forward_pass(model, queries_deroped, ForwardMode::train);
    double loss = kl_from_cache(c.p, target);
    if (!std::isfinite(loss)) {
        throw std::runtime_error("train_step: non-finite loss at step " +
                                 std::to_string(state.step + 1));
    }
    QGrads grads;
    backward_pass(model, c, target, grads);
    update_running_stats(model, c, state.bn_momentum);
    adam_step(model, state, grads);
    return loss;
}

double train_step(QModel& model, TrainerState& state, const TrainBatch& batch) {
    Mat target = attention_target_rows(batch.queries_roped, batch.keys_roped,
                                       batch.key_assignment, model.n_buckets());
    return train_step_on_target(model, state, batch.queries_deroped, target);
}

std::vector<std::size_t> sample_long_range(std::span<const std::uint64_t> query_positions,
                                           std::span<const std::uint64_t> key_positions,
                                           const TensorBlock& scores,
                                           std::uint64_t threshold) {
    if (query_positions.size() != scores.rows || key_positions.size() != scores.dim) {
        throw std::invalid_argument("sample_long_range: positions do not align with score rows");
    }
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < scores.rows; ++i) {
        const float* r = scores.row(i);
        std::size_t best = 0;
        for (std::size_t k = 1; k < scores.dim; ++k) {
            if (r[k] > r[best]) {
                best = k;
            }
        }
        std::uint64_t qp = query_positions[i];
        std::uint64_t kp = key_positions[best];
        std::uint64_t gap = qp > kp ? qp - kp : kp - qp;
        if (gap > threshold) {
            kept.push_back(i);
        }
    }
    return kept;
}

std::vector<std::uint32_t> batched_bucket_select(const QModel& model,
                                                 const TensorBlock& query_group, std::size_t l) {
    const std::size_t C = model.n_buckets();
    if (l < 1 || l > C) {
        throw std::invalid_argument("batched_bucket_select: l=" + std::to_string(l) +
                                    " outside [1, " + std::to_string(C) + "]");
    }
    ForwardCache c = forward_pass(model, query_group, ForwardMode::eval);
    std::vector<double> score(C, 0.0);
    for (std::size_t i = 0; i < c.p.rows; ++i) {
        const double* r = c.p.row(i);
        for (std::size_t j = 0; j < C; ++j) {
            score[j] += r[j];
        }
    }
    std::vector<std::uint32_t> ids(C);
    std::iota(ids.begin(), ids.end(), 0u);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(l), ids.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (score[a] != score[b]) {
                              return score[a] > score[b];
                          }
                          return a < b;
                      });
    ids.resize(l);
    return ids;
}

namespace {

struct NamedParam {
    const char* name;
    const Mat* mat;
};

std::vector<NamedParam> checkpoint_order(const QModel& m) {
    return {{"w1", &m.w1},
            {"b1", &m.b1},
            {"bn_gamma", &m.bn_gamma},
            {"bn_beta", &m.bn_beta},
            {"bn_run_mean", &m.bn_run_mean},
            {"bn_run_var", &m.bn_run_var},
            {"w2", &m.w2},
            {"b2", &m.b2}};
}

} // namespace

void qmodel_save(const QModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError(IoErrorKind::OpenFailed, "cannot write " + (dir / "manifest.txt").string());
    }
    for (const NamedParam& p : checkpoint_order(model)) {
        manifest << p.name << ' ' << p.mat->rows << ' ' << p.mat->cols << '\n';
        tensor_write(p.mat->to_tensor(), dir / (std::string(p.name) + ".tensor"));
    }
    if (!manifest.flush()) {
        throw IoError(IoErrorKind::OpenFailed, "short write to " + (dir / "manifest.txt").string());
    }
}

QModel qmodel_load(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError(IoErrorKind::OpenFailed, "cannot read " + (dir / "manifest.txt").string());
    }
    QModel m;
    auto slots = checkpoint_order(m);
    std::string line;
    std::size_t slot = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string name;
        std::size_t rows = 0, cols = 0;
        if (!(ls >> name >> rows >> cols)) {
            throw IoError(IoErrorKind::BadShape, "malformed manifest line: " + line);
        }
        if (slot >= slots.size() || name != slots[slot].name) {
            throw IoError(IoErrorKind::BadShape,
                          "unexpected checkpoint entry '" + name + "' at slot " +
                                  std::to_string(slot));
        }
        TensorBlock t = tensor_read(dir / (name + ".tensor"));
        if (t.rows != rows || t.dim != cols) {
            throw IoError(IoErrorKind::BadShape,
                          "manifest shape " + shape_str(rows, cols) + " disagrees with tensor " +
                                  shape_str(t.rows, t.dim) + " for " + name);
        }
        *const_cast<Mat*>(slots[slot].mat) = mat_from_tensor(t);
        slot++;
    }
    if (slot != slots.size()) {
        throw IoError(IoErrorKind::Truncated, "checkpoint manifest lists " + std::to_string(slot) +
                                                      " of 8 tensors");
    }
    if (m.w1.cols != m.b1.cols || m.w1.cols != m.w2.rows || m.w2.cols != m.b2.cols) {
        throw IoError(IoErrorKind::BadShape, "checkpoint tensor shapes are inconsistent");
    }
    return m;
}

} // namespace saap
