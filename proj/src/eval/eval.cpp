#include "stella/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "stella/numcore/ops.hpp"

namespace stella::eval {

double RetrievalReport::headline() const {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += a2v[i] + v2a[i];
    return s / 6.0;
}

std::vector<std::size_t> true_ranks(std::span<const double> sim, std::size_t n, bool by_column) {
    auto at = [&](std::size_t q, std::size_t c) { return by_column ? sim[c * n + q] : sim[q * n + c]; };
    std::vector<std::size_t> ranks(n);
    for (std::size_t q = 0; q < n; ++q) {
        const double s = at(q, q);
        std::size_t ahead = 0;
        for (std::size_t c = 0; c < n; ++c) {
            double x = at(q, c);
            ahead += x > s || (x == s && c < q);
        }
        ranks[q] = ahead + 1;
    }
    return ranks;
}

RetrievalReport zero_shot_retrieval(const Tensor& audio, const Tensor& video) {
    if (audio.rank() != 2 || audio.shape() != video.shape()) {
        throw nc::ShapeError("retrieval expects matching [n, D] feature matrices");
    }
    const std::size_t n = audio.dim(0);
    if (n < kRecallKs.back()) {
        throw std::invalid_argument("retrieval needs at least " + std::to_string(kRecallKs.back()) + " pairs");
    }
    nc::NoGradGuard no_grad;
    Tensor sim = nc::matmul(nc::l2_normalize(audio), nc::transpose(nc::l2_normalize(video), 0, 1));
    RetrievalReport r;
    r.n = n;
    auto fill = [&](std::array<double, 3>& out, bool by_column) {
        auto ranks = true_ranks(sim.data(), n, by_column);
        for (std::size_t k = 0; k < 3; ++k) {
            auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t x) { return x <= kRecallKs[k]; });
            out[k] = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
        }
    };
    fill(r.a2v, false);
    fill(r.v2a, true);
    return r;
}

AccMatrix AccMatrix::from_rows(std::vector<std::vector<double>> rows) {
    AccMatrix m(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (!rows[t].empty()) m.set_row(t, std::move(rows[t]));
    }
    return m;
}

std::size_t AccMatrix::completed() const {
    std::size_t t = 0;
    while (t < rows_.size() && rows_[t].size() == t + 1) ++t;
    return t;
}

void AccMatrix::set_row(std::size_t t, std::vector<double> values) {
    if (t >= rows_.size() || values.size() != t + 1) {
        throw std::invalid_argument("accuracy row " + std::to_string(t) + " needs " + std::to_string(t + 1) +
                                    " values");
    }
    rows_[t] = std::move(values);
}

double AccMatrix::at(std::size_t t, std::size_t i) const {
    if (t >= rows_.size() || i >= rows_[t].size()) {
        throw std::out_of_range("accuracy entry (" + std::to_string(t) + ", " + std::to_string(i) + ") undefined");
    }
    return rows_[t][i];
}

double average_accuracy(const AccMatrix& m) {
    if (m.tasks() == 0 || m.completed() != m.tasks()) {
        throw std::invalid_argument("average accuracy needs a complete matrix");
    }
    const auto& last = m.rows().back();
    return std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(last.size());
}

double average_forgetting(const AccMatrix& m) {
    const std::size_t t_count = m.tasks();
    if (t_count < 2) {
        throw std::invalid_argument("average forgetting needs at least two tasks");
    }
    if (m.completed() != t_count) {
        throw std::invalid_argument("average forgetting needs a complete matrix");
    }
    const std::size_t last = t_count - 1;
    double total = 0.0;
    for (std::size_t i = 0; i < last; ++i) {
        double peak = m.at(i, i);
        for (std::size_t t = i + 1; t < last; ++t) peak = std::max(peak, m.at(t, i));
        total += peak - m.at(last, i);
    }
    return total / static_cast<double>(last);
}

double modality_gap(const Tensor& audio, const Tensor& video) {
    if (audio.rank() != 2 || video.rank() != 2 || audio.dim(1) != video.dim(1)) {
        throw nc::ShapeError("modality gap expects [n, D] features with equal D");
    }
    if (audio.dim(0) == 0 || video.dim(0) == 0) {
        throw std::invalid_argument("modality gap of an empty set");
    }
    nc::NoGradGuard no_grad;
    Tensor diff = nc::sub(nc::mean(nc::l2_normalize(audio), 0), nc::mean(nc::l2_normalize(video), 0));
    return std::sqrt(nc::sum_all(nc::square(diff)).item());
}

double gap_decline(const AccMatrix& gaps) {
    const std::size_t t_count = gaps.tasks();
    if (t_count < 2 || gaps.completed() != t_count) {
        throw std::invalid_argument("gap decline needs a complete matrix of at least two tasks");
    }
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < t_count; ++i) total += gaps.at(i, i) - gaps.at(t_count - 1, i);
    return total / static_cast<double>(t_count - 1);
}

SelectionQuality selection_quality(std::span<const std::size_t> selected, std::span<const std::uint8_t> truth) {
    std::size_t truth_count = 0;
    for (auto t : truth) truth_count += t != 0;
    std::size_t hit = 0;
    for (auto i : selected) {
        if (i >= truth.size()) throw std::out_of_range("selected index beyond truth mask");
        hit += truth[i] != 0;
    }
    SelectionQuality q;
    if (truth_count > 0) q.recall = static_cast<double>(hit) / static_cast<double>(truth_count);
    q.precision = selected.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(selected.size());
    return q;
}

namespace {

void write_map(const Tensor& logits, const std::filesystem::path& file) {
    nc::NoGradGuard no_grad;
    Tensor p = nc::mean(nc::softmax(logits, -1), 1);  // [B, nq, nk]
    const std::size_t b = p.dim(0), nq = p.dim(1), nk = p.dim(2);
    std::ofstream os(file);
    if (!os) throw std::runtime_error("cannot write " + file.string());
    os.precision(17);
    os << "sample,query";
    for (std::size_t k = 0; k < nk; ++k) os << ",k" << k;
    os << '\n';
    const auto& d = p.data();
    for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t q = 0; q < nq; ++q) {
            os << s << ',' << q;
            for (std::size_t k = 0; k < nk; ++k) os << ',' << d[(s * nq + q) * nk + k];
            os << '\n';
        }
    }
    if (!os) throw std::runtime_error("write failed: " + file.string());
}

}  // namespace

void export_attention(const avm::CrossAttnMaps& maps, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_map(maps.a_a, dir / "attention_audio.csv");
    write_map(maps.a_v, dir / "attention_video.csv");
}

std::vector<std::vector<double>> read_attention(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error("cannot read " + file.string());
    std::string line;
    std::getline(is, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        for (int col = 0; std::getline(ss, cell, ','); ++col) {
            if (col >= 2) row.push_back(std::stod(cell));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::pair<Tensor, Tensor> encode_bank(const backbone::Backbone& bb, const data::PatchBank& bank,
                                      const data::Geometry& geometry, std::size_t chunk, std::size_t workers) {
    const std::size_t n = bank.size();
    if (n == 0) throw std::invalid_argument("cannot encode an empty bank");
    const std::size_t chunks = (n + chunk - 1) / chunk;
    std::vector<Tensor> fa(chunks), fv(chunks);
    auto run = [&](std::size_t first) {
        nc::NoGradGuard no_grad;
        for (std::size_t c = first; c < chunks; c += std::max<std::size_t>(1, workers)) {
            std::vector<std::size_t> rows;
            for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) rows.push_back(i);
            auto batch = data::make_batch(bank, rows, geometry);
            auto enc = bb.encode_full(batch.audio, batch.video);
            fa[c] = enc.c_a;
            fv[c] = enc.c_v;
        }
    };
    if (workers <= 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, chunks); ++w) pool.emplace_back(run, w);
        for (auto& t : pool) t.join();
    }
    nc::NoGradGuard no_grad;
    return {nc::concat(fa, 0), nc::concat(fv, 0)};
}

TaskEval evaluate_bank(const backbone::Backbone& bb, const data::PatchBank& bank, const data::Geometry& geometry,
                       std::size_t workers) {
    auto [fa, fv] = encode_bank(bb, bank, geometry, 32, workers);
    TaskEval e;
    e.retrieval = zero_shot_retrieval(fa, fv);
    e.gap = modality_gap(fa, fv);
    return e;
}

}  // namespace stella::eval
