#pragma once

#include "numerics.hpp"
#include "nn.hpp"
#include "checkpoint.hpp"
#include "tokenizer.hpp"
#include "base_model.hpp"
#include "activator.hpp"
#include "router.hpp"
#include "moderation.hpp"
#include "corpus.hpp"
#include "eval.hpp"
#include "pipeline.hpp"
