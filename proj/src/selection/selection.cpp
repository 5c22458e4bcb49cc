#include "stella/selection/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace stella::selection {

void SelectionConfig::validate() const {
    if (!(rho_a > 0.0 && rho_a <= 1.0) || !(rho_v > 0.0 && rho_v <= 1.0)) {
        throw std::invalid_argument("sampling ratios must lie in (0, 1]");
    }
    if (chunk == 0) {
        throw std::invalid_argument("audio time chunk must be positive");
    }
    if (!(beta > 0.0)) {
        throw std::invalid_argument("selection temperature must be positive");
    }
}

std::size_t kappa(std::size_t n, double rho) {
    if (n == 0 || !(rho > 0.0 && rho <= 1.0)) {
        throw std::invalid_argument("kappa needs n > 0 and rho in (0, 1]");
    }
    auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * rho + 0.5));
    return std::clamp<std::size_t>(k, 1, n);
}

Importance importance_scores(const avm::CrossAttnMaps& maps) {
    // A_a is [B, H, N, M]: softmax over audio keys, mean over heads and video queries.
    auto pool = [](const Tensor& logits) {
        Tensor p = nc::softmax(logits, -1);
        return nc::mean(nc::mean(p, 1), 1);
    };
    return {pool(maps.a_a), pool(maps.a_v)};
}

namespace {

void check_kappa(std::size_t k, std::size_t n) {
    if (k == 0 || k > n) {
        throw std::invalid_argument("kappa " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
}

// [B, H, n, d] -> [B, n, H*d]
Tensor token_major(const Tensor& t) {
    Tensor p = nc::permute(t, {0, 2, 1, 3});
    return nc::reshape(p, {t.dim(0), t.dim(2), t.dim(1) * t.dim(3)});
}

}  // namespace

LocalizedQueries gather_localized(const Tensor& q, const Tensor& k, const Tensor& importance, std::size_t kap) {
    if (q.rank() != 4 || q.shape() != k.shape()) {
        throw nc::ShapeError("gather_localized expects matching [B, H, n, d] queries and keys");
    }
    const std::size_t b = q.dim(0), h = q.dim(1), n = q.dim(2), d = q.dim(3);
    if (importance.shape() != nc::Shape{b, n}) {
        throw nc::ShapeError("importance must be [B, n], got " + nc::shape_str(importance.shape()));
    }
    check_kappa(kap, n);
    const auto& iv = importance.data();

    LocalizedQueries out;
    out.kappa = kap;
    out.top.resize(b * kap);
    std::vector<double> w(b * kap);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < b; ++r) {
        std::iota(order.begin(), order.end(), 0);
        const double* row = iv.data() + r * n;
        std::stable_sort(order.begin(), order.end(), [row](std::size_t x, std::size_t y) { return row[x] < row[y]; });
        for (std::size_t j = 0; j < kap; ++j) {
            std::size_t s = order[n - kap + j];
            out.top[r * kap + j] = s;
            w[r * kap + j] = row[s];
        }
    }
    Tensor qg = nc::gather_rows(token_major(q), out.top, kap);  // [B, kappa, H*d]
    Tensor kg = nc::gather_rows(token_major(k), out.top, kap);
    Tensor wt = Tensor::from({b, kap, 1}, w);
    Tensor pooled = nc::div(nc::sum(nc::mul(qg, wt), 1), nc::sum(wt, 1));  // [B, H*d]
    out.q_hat = nc::reshape(pooled, {b, h, d});
    out.k_hat = nc::permute(nc::reshape(kg, {b, kap, h, d}), {0, 2, 1, 3});
    return out;
}

Tensor correlation_scores(const Tensor& k_hat, const Tensor& q_hat, const Tensor& q_past, double beta) {
    if (k_hat.rank() != 4 || q_hat.rank() != 3 || q_hat.shape() != q_past.shape() || q_hat.dim(0) != k_hat.dim(0) ||
        q_hat.dim(1) != k_hat.dim(1) || q_hat.dim(2) != k_hat.dim(3)) {
        throw nc::ShapeError("correlation_scores expects k_hat [B, H, kappa, d] and queries [B, H, d]");
    }
    const std::size_t b = q_hat.dim(0), h = q_hat.dim(1), d = q_hat.dim(2);
    Tensor a_now = nc::attention_logits(nc::reshape(q_hat, {b, h, 1, d}), k_hat, beta);   // [B, H, 1, kappa]
    Tensor a_past = nc::attention_logits(nc::reshape(q_past, {b, h, 1, d}), k_hat, beta);
    // exp(p) / (exp(c) + exp(p)) = sigmoid(p - c)
    Tensor c = nc::sigmoid(nc::sub(a_past, a_now));
    return nc::mean(nc::reshape(c, {b, h, k_hat.dim(2)}), 1);
}

std::vector<double> expand_scores(const Tensor& scores, std::span<const std::size_t> top, std::size_t n) {
    if (scores.rank() != 2 || top.size() != scores.numel()) {
        throw nc::ShapeError("expand_scores: scores and indices disagree");
    }
    const std::size_t b = scores.dim(0), kap = scores.dim(1);
    std::vector<double> out(b * n, 0.0);
    const auto& s = scores.data();
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < kap; ++j) {
            std::size_t p = top[r * kap + j];
            if (p >= n) {
                throw std::out_of_range("expand_scores: index beyond row length");
            }
            out[r * n + p] = s[r * kap + j];
        }
    }
    return out;
}

namespace {

void check_scores(std::span<const double> importance, std::span<const double> corr, std::size_t batch,
                  std::size_t n) {
    if (importance.size() != batch * n || corr.size() != batch * n) {
        throw nc::ShapeError("selection scores must be B x n");
    }
    for (double c : corr) {
        if (!(c >= 0.0 && c <= 1.0)) {
            throw std::invalid_argument("correlation scores must lie in [0, 1]");
        }
    }
    for (double i : importance) {
        if (!(i >= 0.0) || !std::isfinite(i)) {
            throw std::invalid_argument("importance scores must be finite and non-negative");
        }
    }
}

// Draws one index proportionally to w among entries with w > 0; w must have positive total.
std::size_t weighted_draw(const std::vector<double>& w, double total, Rng& rng) {
    double u = rng.uniform() * total;
    std::size_t last = w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        last = i;
        u -= w[i];
        if (u < 0.0) return i;
    }
    return last;  // rounding left u marginally non-negative
}

// Fill `picked` (length n) up to k using the unpicked entries of lowest corr.
void fill_by_corr(std::vector<std::uint8_t>& picked, std::size_t& count, std::size_t k, const double* corr,
                  std::size_t n) {
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
        if (!picked[i]) rest.push_back(i);
    }
    std::stable_sort(rest.begin(), rest.end(), [corr](std::size_t x, std::size_t y) { return corr[x] < corr[y]; });
    for (std::size_t i = 0; count < k; ++i) {
        picked[rest[i]] = 1;
        ++count;
    }
}

void emit(Selection& sel, std::size_t r, const std::vector<std::uint8_t>& picked) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < picked.size(); ++i) {
        if (picked[i]) sel.indices[r * sel.kappa + j++] = i;
    }
    if (j != sel.kappa) {
        throw std::logic_error("selection produced " + std::to_string(j) + " patches, expected " +
                               std::to_string(sel.kappa));
    }
}

}  // namespace

Selection select_video(std::span<const double> importance, std::span<const double> corr, std::size_t batch,
                       std::size_t n, std::size_t k, Rng& rng) {
    check_kappa(k, n);
    check_scores(importance, corr, batch, n);
    Selection sel;
    sel.batch = batch;
    sel.kappa = k;
    sel.indices.resize(batch * k);
    sel.flags.resize(batch * n);
    std::vector<double> w(n);
    std::vector<std::uint8_t> picked(n);
    for (std::size_t r = 0; r < batch; ++r) {
        const double* ir = importance.data() + r * n;
        const double* cr = corr.data() + r * n;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            bool f = rng.bernoulli(cr[i]);
            sel.flags[r * n + i] = f;
            w[i] = f ? 0.0 : ir[i];
            total += w[i];
        }
        std::fill(picked.begin(), picked.end(), 0);
        std::size_t count = 0;
        while (count < k && total > 0.0) {
            std::size_t i = weighted_draw(w, total, rng);
            picked[i] = 1;
            ++count;
            w[i] = 0.0;
            total = 0.0;
            for (double x : w) total += x;
        }
        if (count < k) {
            fill_by_corr(picked, count, k, cr, n);
        }
        emit(sel, r, picked);
    }
    return sel;
}

Selection select_audio(std::span<const double> importance, std::span<const double> corr, std::size_t batch,
                       const data::GridGeometry& grid, std::size_t chunk, std::size_t k, Rng& rng) {
    const std::size_t num_time = grid.rows;
    const std::size_t num_freq = grid.cols;
    const std::size_t n = grid.size();
    if (grid.frames != 1) {
        throw std::invalid_argument("audio grid must have a single frame");
    }
    if (chunk == 0 || chunk > num_time) {
        throw std::invalid_argument("time chunk " + std::to_string(chunk) + " outside [1, " +
                                    std::to_string(num_time) + "]");
    }
    check_kappa(k, n);
    check_scores(importance, corr, batch, n);
    const std::size_t num_chunk = (num_time + chunk - 1) / chunk;

    Selection sel;
    sel.batch = batch;
    sel.kappa = k;
    sel.indices.resize(batch * k);
    sel.flags.resize(batch * n);
    std::vector<double> w(num_chunk);
    std::vector<std::uint8_t> picked(n);
    for (std::size_t r = 0; r < batch; ++r) {
        const double* ir = importance.data() + r * n;
        const double* cr = corr.data() + r * n;
        std::uint8_t* fr = sel.flags.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            fr[i] = rng.bernoulli(cr[i]);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < num_chunk; ++c) {
            std::size_t t0 = c * chunk, t1 = std::min(num_time, t0 + chunk);
            double s = 0.0;
            for (std::size_t i = t0 * num_freq; i < t1 * num_freq; ++i) s += ir[i];
            w[c] = s / static_cast<double>(t1 - t0);
            total += w[c];
        }
        // Weighted order without replacement; zero-mass chunks follow in random order.
        std::vector<std::size_t> order;
        std::vector<double> left = w;
        while (total > 0.0) {
            std::size_t c = weighted_draw(left, total, rng);
            order.push_back(c);
            left[c] = 0.0;
            total = 0.0;
            for (double x : left) total += x;
        }
        std::vector<std::size_t> zero;
        for (std::size_t c = 0; c < num_chunk; ++c) {
            if (std::find(order.begin(), order.end(), c) == order.end()) zero.push_back(c);
        }
        for (std::size_t i = zero.size(); i > 1; --i) {
            std::swap(zero[i - 1], zero[rng.index(i)]);
        }
        order.insert(order.end(), zero.begin(), zero.end());

        std::fill(picked.begin(), picked.end(), 0);
        std::size_t count = 0;
        for (std::size_t c : order) {
            std::size_t t0 = c * chunk, t1 = std::min(num_time, t0 + chunk);
            for (std::size_t i = t0 * num_freq; i < t1 * num_freq && count < k; ++i) {
                if (!fr[i]) {
                    picked[i] = 1;
                    ++count;
                }
            }
            if (count == k) break;
        }
        if (count < k) {
            fill_by_corr(picked, count, k, cr, n);
        }
        emit(sel, r, picked);
    }
    return sel;
}

Selection random_video(std::size_t batch, std::size_t n, std::size_t k, Rng& rng) {
    std::vector<double> uniform(batch * n, 1.0 / static_cast<double>(n));
    std::vector<double> zero(batch * n, 0.0);
    return select_video(uniform, zero, batch, n, k, rng);
}

Selection random_audio(std::size_t batch, const data::GridGeometry& grid, std::size_t chunk, std::size_t k,
                       Rng& rng) {
    const std::size_t n = grid.size();
    std::vector<double> uniform(batch * n, 1.0 / static_cast<double>(n));
    std::vector<double> zero(batch * n, 0.0);
    return select_audio(uniform, zero, batch, grid, chunk, k, rng);
}

data::PatchSet gather_selected(const data::PatchSet& x, std::span<const std::size_t> idx, std::size_t k) {
    const std::size_t b = x.batch(), n = x.count();
    if (idx.size() != b * k || k == 0) {
        throw data::DataError("gather_selected: expected " + std::to_string(b) + " x " + std::to_string(k) +
                              " indices");
    }
    std::vector<std::uint8_t> seen(n);
    for (std::size_t r = 0; r < b; ++r) {
        std::fill(seen.begin(), seen.end(), 0);
        for (std::size_t j = 0; j < k; ++j) {
            std::size_t i = idx[r * k + j];
            if (i >= n) {
                throw data::DataError("gather_selected: index " + std::to_string(i) + " out of range");
            }
            if (seen[i]++) {
                throw data::DataError("gather_selected: duplicate index " + std::to_string(i));
            }
        }
    }
    data::PatchSet out;
    out.modality = x.modality;
    out.grid = x.grid;
    std::vector<std::size_t> flat(idx.begin(), idx.end());
    out.patches = nc::gather_rows(x.patches, flat, k);
    out.indices.resize(b * k);
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
            out.indices[r * k + j] = x.indices[r * n + idx[r * k + j]];
        }
    }
    return out;
}

void write_trace_header(std::ostream& os) { os << "step,modality,row,patch_index,I,C,flagged,selected\n"; }

void write_trace(std::ostream& os, const TraceRows& t) {
    if (t.selection == nullptr || t.importance.size() != t.batch * t.n || t.corr.size() != t.batch * t.n) {
        throw std::invalid_argument("write_trace: inconsistent trace rows");
    }
    std::vector<std::uint8_t> chosen(t.n);
    const auto old = os.precision(17);
    for (std::size_t r = 0; r < t.batch; ++r) {
        std::fill(chosen.begin(), chosen.end(), 0);
        for (auto i : t.selection->row(r)) chosen[i] = 1;
        for (std::size_t i = 0; i < t.n; ++i) {
            os << t.step << ',' << data::modality_name(t.modality) << ',' << r << ',' << i << ','
               << t.importance[r * t.n + i] << ',' << t.corr[r * t.n + i] << ','
               << int(t.selection->flags[r * t.n + i]) << ',' << int(chosen[i]) << '\n';
        }
    }
    os.precision(old);
}

}  // namespace stella::selection
