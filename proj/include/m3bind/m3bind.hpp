#pragma once

// Umbrella header: text-anchored multimodal embedding binding, adaptive
// modality balancing, LoRA adaptation, teacher-student distillation and the
// retrieval/classification evaluation suite, on synthetic desk-scale data.

#include "m3bind/balancing.hpp"
#include "m3bind/checkpoint.hpp"
#include "m3bind/common.hpp"
#include "m3bind/config.hpp"
#include "m3bind/corpus_io.hpp"
#include "m3bind/encoders.hpp"
#include "m3bind/evaluation.hpp"
#include "m3bind/gradcheck.hpp"
#include "m3bind/objectives.hpp"
#include "m3bind/optim.hpp"
#include "m3bind/pipeline.hpp"
#include "m3bind/rng.hpp"
#include "m3bind/sha256.hpp"
#include "m3bind/synthdata.hpp"
#include "m3bind/tape.hpp"
#include "m3bind/tensor.hpp"
#include "m3bind/training.hpp"
