#pragma once

#include <string>

#include "m3bind/io_util.hpp"
#include "m3bind/synthdata.hpp"

namespace m3bind {

// Corpus container format: "M3BD" magic, version, (K, d_m, V, |D_m|) header,
// then records as little-endian f64 signals, varint token sequences and
// varint class labels. One file per modality.
inline constexpr char kCorpusMagic[4] = {'M', '3', 'B', 'D'};
inline constexpr std::uint32_t kCorpusVersion = 1;

struct CorpusHeader {
  std::uint32_t num_classes = 0;
  std::uint32_t obs_dim = 0;
  std::uint32_t vocab_size = 0;
  std::uint64_t record_count = 0;
};

inline void save_corpus(const std::string& path, const SyntheticCorpus& corpus,
                        std::uint32_t num_classes, std::uint32_t obs_dim,
                        std::uint32_t vocab_size) {
  ByteWriter w;
  w.bytes(kCorpusMagic, 4);
  w.u32(kCorpusVersion);
  w.u32(num_classes);
  w.u32(obs_dim);
  w.u32(vocab_size);
  w.u64(corpus.records.size());
  for (const Record& rec : corpus.records) {
    if (rec.signal.size() != obs_dim) {
      throw ShapeError("save_corpus: record signal " + rec.signal.shape_str() +
                       " does not match obs_dim " + std::to_string(obs_dim));
    }
    for (std::size_t i = 0; i < rec.signal.size(); ++i) w.f64(rec.signal[i]);
    w.varint(rec.tokens.size());
    for (std::uint32_t t : rec.tokens) w.varint(t);
    w.varint(rec.label);
  }
  w.write_file(path);
}

inline std::pair<CorpusHeader, SyntheticCorpus> load_corpus(const std::string& path,
                                                            const std::string& modality_id) {
  ByteReader r = ByteReader::from_file(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCorpusMagic, 4) != 0) {
    throw DataFormatError("load_corpus: wrong magic in " + path + " (expected M3BD, found '" +
                          std::string(magic, 4) + "')");
  }
  const std::uint32_t version = r.u32();
  if (version != kCorpusVersion) {
    throw DataFormatError("load_corpus: unsupported corpus version " + std::to_string(version) +
                          " in " + path);
  }
  CorpusHeader header;
  header.num_classes = r.u32();
  header.obs_dim = r.u32();
  header.vocab_size = r.u32();
  header.record_count = r.u64();

  SyntheticCorpus corpus;
  corpus.modality_id = modality_id;
  corpus.records.reserve(header.record_count);
  for (std::uint64_t i = 0; i < header.record_count; ++i) {
    Record rec;
    rec.signal = Tensor({header.obs_dim});
    for (std::uint32_t c = 0; c < header.obs_dim; ++c) rec.signal[c] = r.f64();
    const std::uint64_t n_tokens = r.varint();
    if (n_tokens == 0) {
      throw DataFormatError("load_corpus: empty token sequence in record " + std::to_string(i) +
                            " at offset " + std::to_string(r.offset()));
    }
    rec.tokens.reserve(n_tokens);
    for (std::uint64_t t = 0; t < n_tokens; ++t) {
      const std::uint64_t tok = r.varint();
      if (tok >= header.vocab_size) {
        throw DataFormatError("load_corpus: token id " + std::to_string(tok) +
                              " out of vocabulary at offset " + std::to_string(r.offset()));
      }
      rec.tokens.push_back(static_cast<std::uint32_t>(tok));
    }
    const std::uint64_t label = r.varint();
    if (label >= header.num_classes) {
      throw DataFormatError("load_corpus: class label " + std::to_string(label) +
                            " out of range at offset " + std::to_string(r.offset()));
    }
    rec.label = static_cast<std::uint32_t>(label);
    corpus.records.push_back(std::move(rec));
  }
  if (!r.done()) {
    throw DataFormatError("load_corpus: trailing bytes at offset " + std::to_string(r.offset()) +
                          " in " + path);
  }
  return {header, std::move(corpus)};
}

}  // namespace m3bind
