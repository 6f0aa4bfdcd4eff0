// SPDX-License-Identifier: Apache-2.0
// Small models and corpora shared by the tests.
#pragma once

#include "platemark/dataset.hpp"
#include "platemark/model.hpp"

namespace pmtest {

inline platemark::ModelConfig tiny_config(platemark::Extractor ex = platemark::Extractor::ResCNN,
                                          std::uint64_t seed = 1) {
  platemark::ModelConfig c;
  c.extractor = ex;
  c.embedding_dim = 4;
  c.layers = 2;
  c.width = 8;
  c.price_head = {12};
  c.aux_head = {10};
  c.seed = seed;
  return c;
}

inline platemark::SplitDataset small_dataset(std::size_t n = 400, std::uint64_t seed = 5, double noise = 0.3) {
  auto corpus = platemark::generate_synthetic(n, seed, noise);
  return platemark::build_dataset(corpus.records, corpus.market, seed);
}

}  // namespace pmtest
