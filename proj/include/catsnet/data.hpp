#pragma once

// LCQMC-format ingestion and batch assembly: TSV records of
// sentence_a <TAB> sentence_b <TAB> label, character tokenization,
// truncation to max_len and right-padding to the batch-local maximum.

#include <algorithm>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "catsnet/embedding.hpp"
#include "catsnet/errors.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

struct PairRecord {
    std::string a;
    std::string b;
    int label = 0;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

} // namespace detail

// One record per line; a first line whose third field is not 0/1 is
// treated as a header and skipped.
inline std::vector<PairRecord> load_lcqmc(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MalformedLine("lcqmc: cannot open '" + path + "'");
    std::vector<PairRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto fields = detail::split_tabs(line);
        if (fields.size() != 3)
            throw MalformedLine("lcqmc: line " + std::to_string(line_no) + " has " +
                                std::to_string(fields.size()) + " fields, expected 3");
        if (fields[2] != "0" && fields[2] != "1") {
            if (line_no == 1) continue; // header
            throw BadLabel("lcqmc: line " + std::to_string(line_no) + " has label '" + fields[2] +
                           "', expected 0 or 1");
        }
        records.push_back({std::move(fields[0]), std::move(fields[1]), fields[2] == "1" ? 1 : 0});
    }
    return records;
}

inline void write_lcqmc(const std::string& path, const std::vector<PairRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    for (const PairRecord& r : records) out << r.a << '\t' << r.b << '\t' << r.label << '\n';
}

struct TokenizedPair {
    std::vector<int> ids_a;
    std::vector<int> ids_b;
    std::vector<bool> mask_a; // all true before padding; padding appends false
    std::vector<bool> mask_b;
    int label = 0;
};

inline TokenizedPair tokenize_pair(const PairRecord& record, const Vocabulary& vocab,
                                   std::size_t max_len) {
    TokenizedPair pair;
    pair.ids_a = tokenize(record.a, vocab);
    pair.ids_b = tokenize(record.b, vocab);
    if (pair.ids_a.size() > max_len) pair.ids_a.resize(max_len);
    if (pair.ids_b.size() > max_len) pair.ids_b.resize(max_len);
    if (pair.ids_a.empty() || pair.ids_b.empty())
        throw EmptyAfterTokenization("pair ('" + record.a + "', '" + record.b +
                                     "') has an empty side after tokenization");
    pair.mask_a.assign(pair.ids_a.size(), true);
    pair.mask_b.assign(pair.ids_b.size(), true);
    pair.label = record.label;
    return pair;
}

struct PairBatch {
    IdMatrix ids_a;
    IdMatrix ids_b;
    Tensor mask_a; // [b, n_a] of 0/1, constant
    Tensor mask_b;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

namespace detail {

inline void pad_side(const std::vector<TokenizedPair>& pairs, bool side_a, IdMatrix& ids,
                     Tensor& mask) {
    std::size_t width = 0;
    for (const TokenizedPair& p : pairs)
        width = std::max(width, (side_a ? p.ids_a : p.ids_b).size());
    ids.batch = pairs.size();
    ids.len = width;
    ids.ids.assign(pairs.size() * width, Vocabulary::kPadId);
    std::vector<double> m(pairs.size() * width, 0.0);
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto& seq = side_a ? pairs[r].ids_a : pairs[r].ids_b;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            ids.ids[r * width + t] = seq[t];
            m[r * width + t] = 1.0;
        }
    }
    mask = Tensor({pairs.size(), width}, std::move(m));
}

} // namespace detail

// Right-pads both sides to their batch-local maxima.
inline PairBatch collate(const std::vector<TokenizedPair>& pairs) {
    if (pairs.empty()) throw EmptyDataset("collate: empty batch");
    PairBatch batch;
    detail::pad_side(pairs, true, batch.ids_a, batch.mask_a);
    detail::pad_side(pairs, false, batch.ids_b, batch.mask_b);
    for (const TokenizedPair& p : pairs) batch.labels.push_back(p.label);
    return batch;
}

inline std::vector<PairBatch> make_batches(const std::vector<PairRecord>& records,
                                           const Vocabulary& vocab, std::size_t batch_size,
                                           std::size_t max_len, std::uint64_t seed, bool shuffle) {
    if (batch_size == 0) throw EmptyDataset("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle) {
        Rng rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<PairBatch> batches;
    std::vector<TokenizedPair> bucket;
    for (std::size_t i : order) {
        bucket.push_back(tokenize_pair(records[i], vocab, max_len));
        if (bucket.size() == batch_size) {
            batches.push_back(collate(bucket));
            bucket.clear();
        }
    }
    if (!bucket.empty()) batches.push_back(collate(bucket)); // final partial batch kept
    return batches;
}

// Single pair as a batch of one (inference path); label defaults to 0.
inline PairBatch single_pair_batch(const std::string& a, const std::string& b,
                                   const Vocabulary& vocab, std::size_t max_len) {
    return collate({tokenize_pair({a, b, 0}, vocab, max_len)});
}

} // namespace catsnet
