#pragma once

#include "kloc/trainer.hpp"
#include "test_util.hpp"

namespace kloc::testutil {

/// Shared trained toy model; built once per test binary (a few seconds).
struct TrainedTiny {
  World world;
  Tokenizer tok;
  ModelConfig mc;
  ProbeSplit split;
  TrainResult result;
};

inline const TrainedTiny& trained_tiny() {
  static TrainedTiny fixture = [] {
    TrainedTiny f;
    f.world = tiny_world(7, 12, 3, 24);
    f.tok = Tokenizer::build(f.world);
    f.mc.L = 2;
    f.mc.d = 32;
    f.mc.H = 2;
    f.mc.d_ff = 64;
    f.mc.V = f.tok.vocab_size();
    f.mc.T_max = 16;
    f.split = split_probe_sets(f.world);
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 16;
    tc.lr = 3e-3f;
    tc.seed = 7;
    tc.recall_target = 0.95;
    f.result = train(f.world, f.tok, f.mc, tc);
    return f;
  }();
  return fixture;
}

}  // namespace kloc::testutil
