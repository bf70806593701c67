// Copyright 2026-present the irgen project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Umbrella header for the whole library.

#include "irgen/config.hpp"
#include "irgen/core.hpp"
#include "irgen/eval.hpp"
#include "irgen/gradcheck.hpp"
#include "irgen/identifiers.hpp"
#include "irgen/io.hpp"
#include "irgen/kmeans.hpp"
#include "irgen/metrics.hpp"
#include "irgen/optim.hpp"
#include "irgen/search.hpp"
#include "irgen/seqmodel.hpp"
#include "irgen/tokenizer.hpp"
