#pragma once

// Task data: the synthetic copy task and byte-level corpus ingestion.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mgt/errors.hpp"
#include "mgt/rng.hpp"

namespace mgt {

// One batch of copy-task sequences. Every sequence is
//   s_0 .. s_{m-1}  SEP  s_0 .. s_{m-1}
// with SEP = vocab-1 and symbols drawn uniformly from [0, vocab-2]. The mask
// flags the trailing m token positions (the half that must be reproduced).
struct CopyBatch {
    std::vector<std::vector<int>> sequences;
    std::vector<bool> mask;  // length 2m+1, shared by all sequences
};

inline CopyBatch gen_copy_batch(size_t vocab, size_t half_len, size_t batch, uint64_t seed) {
    if (vocab < 3) throw InvalidConfigError("copy task needs vocab >= 3 (separator plus a 2+ symbol alphabet)");
    if (half_len < 1) throw InvalidConfigError("copy task needs half_len >= 1");
    size_t len = 2 * half_len + 1;
    int sep = int(vocab) - 1;
    CopyBatch out;
    out.mask.assign(len, false);
    for (size_t i = half_len + 1; i < len; ++i) out.mask[i] = true;
    out.sequences.reserve(batch);
    for (size_t b = 0; b < batch; ++b) {
        Rng rng(mix_seed(seed, b, 0x636f7079));
        std::vector<int> seq(len);
        for (size_t i = 0; i < half_len; ++i) {
            seq[i] = int(rng.uniform_int(vocab - 1));
            seq[half_len + 1 + i] = seq[i];
        }
        seq[half_len] = sep;
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

// Byte-level corpus with a contiguous 90/10 train/val split. The vocabulary
// is built from the train split only; val bytes never seen in training map to
// a reserved unknown id (the last id).
struct CharCorpus {
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    std::map<unsigned char, int> byte_to_id;  // sorted by byte value, so stable
    std::vector<unsigned char> id_to_byte;
    int unk_id = 0;
    size_t vocab_size = 0;  // includes the unknown id

    std::string decode(const std::vector<int>& ids) const {
        std::string s;
        s.reserve(ids.size());
        for (int id : ids) s.push_back(id == unk_id ? '?' : char(id_to_byte[size_t(id)]));
        return s;
    }
};

inline CharCorpus load_char_corpus(const std::string& path, size_t min_bytes = 10000) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot read corpus file " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < min_bytes)
        throw IngestionError("corpus " + path + " has " + std::to_string(bytes.size()) +
                             " bytes, need at least " + std::to_string(min_bytes));

    size_t split = bytes.size() * 9 / 10;
    CharCorpus c;
    for (size_t i = 0; i < split; ++i) {
        unsigned char b = (unsigned char)bytes[i];
        if (!c.byte_to_id.count(b)) c.byte_to_id[b] = 0;
    }
    int next = 0;
    for (auto& [b, id] : c.byte_to_id) {  // std::map iterates in byte order
        id = next++;
        c.id_to_byte.push_back(b);
    }
    c.unk_id = next;
    c.vocab_size = size_t(next) + 1;

    c.train_ids.reserve(split);
    for (size_t i = 0; i < split; ++i) c.train_ids.push_back(c.byte_to_id.at((unsigned char)bytes[i]));
    c.val_ids.reserve(bytes.size() - split);
    for (size_t i = split; i < bytes.size(); ++i) {
        auto it = c.byte_to_id.find((unsigned char)bytes[i]);
        c.val_ids.push_back(it == c.byte_to_id.end() ? c.unk_id : it->second);
    }
    return c;
}

// batch of contiguous windows of `window` ids sampled from a split.
inline std::vector<std::vector<int>> sample_windows(const std::vector<int>& ids, size_t window, size_t batch,
                                                    uint64_t seed) {
    if (ids.size() < window + 1)
        throw InvalidConfigError("corpus split of " + std::to_string(ids.size()) +
                                 " ids is too short for window " + std::to_string(window));
    std::vector<std::vector<int>> out;
    out.reserve(batch);
    Rng rng(mix_seed(seed, 0x77696e64));
    for (size_t b = 0; b < batch; ++b) {
        size_t start = size_t(rng.uniform_int(ids.size() - window));
        out.emplace_back(ids.begin() + long(start), ids.begin() + long(start + window));
    }
    return out;
}

}  // namespace mgt
