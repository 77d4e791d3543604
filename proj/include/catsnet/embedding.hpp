#pragma once

// Character-level vocabulary and embedding table. Tokens map to dense
// vectors; id 0 is PAD (zero row, gradient masked), id 1 is UNK.

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "catsnet/errors.hpp"
#include "catsnet/random.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

// Split into Unicode scalar values, each returned as its UTF-8 byte span.
// A malformed byte is kept as a one-byte token rather than rejected.
inline std::vector<std::string> utf8_chars(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (c < 0x80)
            len = 1;
        else if ((c & 0xE0) == 0xC0)
            len = 2;
        else if ((c & 0xF0) == 0xE0)
            len = 3;
        else if ((c & 0xF8) == 0xF0)
            len = 4;
        if (i + len > text.size()) len = 1;
        for (std::size_t j = 1; j < len; ++j) {
            if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80) {
                len = 1;
                break;
            }
        }
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

class Vocabulary {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kUnkToken = "<unk>";

    Vocabulary() {
        id_to_token_ = {kPadToken, kUnkToken};
        token_to_id_ = {{kPadToken, kPadId}, {kUnkToken, kUnkId}};
    }

    int add(const std::string& token) {
        if (token_to_id_.count(token))
            throw DuplicateToken("vocabulary: token '" + token + "' already present");
        const int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    int add_if_absent(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        return add(token);
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    int id_for(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token_for(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

    std::size_t size() const { return id_to_token_.size(); }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

inline std::vector<int> tokenize(const std::string& sentence, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const std::string& ch : utf8_chars(sentence)) ids.push_back(vocab.id_for(ch));
    return ids;
}

// Builds a character vocabulary from raw sentences (training corpus order).
inline Vocabulary build_vocabulary(const std::vector<std::string>& sentences) {
    Vocabulary vocab;
    for (const std::string& s : sentences)
        for (const std::string& ch : utf8_chars(s)) vocab.add_if_absent(ch);
    return vocab;
}

struct EmbeddingTable {
    Tensor weights; // [vocab_size, dim]; requires_grad tracks trainable
    std::size_t dim = 0;
    bool trainable = true;
};

inline EmbeddingTable random_embedding_table(const Vocabulary& vocab, std::size_t dim, Rng& rng,
                                             bool trainable = true) {
    EmbeddingTable table;
    table.dim = dim;
    table.trainable = trainable;
    table.weights = normal_tensor({vocab.size(), dim}, 0.0, 0.01, rng, trainable);
    std::fill(table.weights.data().begin(), table.weights.data().begin() + dim, 0.0); // PAD row
    return table;
}

// word2vec text format: header "vocab_size dim", then one token and dim
// reals per line. Returns the vocabulary (PAD/UNK prepended) and the
// table; UNK is the mean of all loaded vectors. When an existing
// vocabulary is passed, its tokens missing from the file get N(0, 0.01)
// rows and file tokens outside it are ignored.
inline std::pair<Vocabulary, EmbeddingTable> load_pretrained(const std::string& path,
                                                             const Vocabulary* vocab = nullptr,
                                                             std::uint64_t seed = 0,
                                                             bool trainable = true) {
    std::ifstream in(path);
    if (!in) throw ParseError("embeddings: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw EmptyFile("embeddings: '" + path + "' is empty");
    std::istringstream header(line);
    long long count = 0, dim = 0;
    std::string extra;
    if (!(header >> count >> dim) || (header >> extra) || count <= 0 || dim <= 0)
        throw ParseError("embeddings: malformed header '" + line + "'");

    std::unordered_map<std::string, std::vector<double>> file_rows;
    std::vector<std::string> file_order;
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (long long r = 0; r < count; ++r) {
        if (!std::getline(in, line))
            throw ParseError("embeddings: expected " + std::to_string(count) + " vectors, found " +
                             std::to_string(r));
        std::istringstream ls(line);
        std::string token;
        if (!(ls >> token))
            throw ParseError("embeddings: blank line " + std::to_string(r + 2));
        std::vector<double> row(static_cast<std::size_t>(dim));
        for (long long j = 0; j < dim; ++j)
            if (!(ls >> row[static_cast<std::size_t>(j)]))
                throw ParseError("embeddings: line " + std::to_string(r + 2) + " has fewer than " +
                                 std::to_string(dim) + " values");
        double tail;
        if (ls >> tail)
            throw ParseError("embeddings: line " + std::to_string(r + 2) + " has more than " +
                             std::to_string(dim) + " values");
        if (file_rows.count(token))
            throw DuplicateToken("embeddings: token '" + token + "' appears twice (line " +
                                 std::to_string(r + 2) + ")");
        for (long long j = 0; j < dim; ++j)
            mean[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)];
        file_rows.emplace(token, std::move(row));
        file_order.push_back(token);
    }
    for (double& v : mean) v /= static_cast<double>(count);

    Vocabulary result;
    if (vocab) result = *vocab;
    else
        for (const std::string& token : file_order) result.add(token);

    Rng rng(seed);
    std::normal_distribution<double> fill(0.0, 0.01);
    const std::size_t d = static_cast<std::size_t>(dim);
    std::vector<double> weights(result.size() * d, 0.0);
    for (std::size_t id = 0; id < result.size(); ++id) {
        double* row = weights.data() + id * d;
        if (id == Vocabulary::kPadId) continue;
        if (id == Vocabulary::kUnkId) {
            std::copy(mean.begin(), mean.end(), row);
            continue;
        }
        auto it = file_rows.find(result.token_for(static_cast<int>(id)));
        if (it != file_rows.end())
            std::copy(it->second.begin(), it->second.end(), row);
        else
            for (std::size_t j = 0; j < d; ++j) row[j] = fill(rng);
    }

    EmbeddingTable table;
    table.dim = d;
    table.trainable = trainable;
    table.weights = Tensor({result.size(), d}, std::move(weights), trainable);
    return {std::move(result), std::move(table)};
}

struct IdMatrix {
    std::size_t batch = 0;
    std::size_t len = 0;
    std::vector<int> ids; // row-major [batch, len]
};

// Row gather [batch, len] -> [batch, len, dim]. The backward scatters into
// the table; positions holding PAD contribute no gradient, so the PAD row
// stays exactly zero under training.
inline Tensor embed(const IdMatrix& ids, const EmbeddingTable& table) {
    const std::size_t rows = table.weights.dim(0), d = table.dim;
    for (int id : ids.ids)
        if (id < 0 || static_cast<std::size_t>(id) >= rows)
            throw IdOutOfRange("embed: id " + std::to_string(id) + " outside vocabulary of " +
                               std::to_string(rows));
    std::vector<double> out(ids.batch * ids.len * d);
    const double* w = table.weights.data().data();
    for (std::size_t i = 0; i < ids.ids.size(); ++i) {
        const std::size_t id = static_cast<std::size_t>(ids.ids[i]);
        std::copy(w + id * d, w + (id + 1) * d, out.begin() + i * d);
    }
    detail::Node* wn = table.weights.node().get();
    const std::vector<int> flat = ids.ids;
    return detail::make_op(Shape{ids.batch, ids.len, d}, std::move(out), {table.weights},
                           [=](detail::Node& self) {
                               if (!wn->requires_grad) return;
                               wn->ensure_grad();
                               const double* g = self.grad.data();
                               for (std::size_t i = 0; i < flat.size(); ++i) {
                                   if (flat[i] == Vocabulary::kPadId) continue;
                                   double* dst = wn->grad.data() +
                                                 static_cast<std::size_t>(flat[i]) * d;
                                   for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                               }
                           });
}

} // namespace catsnet
