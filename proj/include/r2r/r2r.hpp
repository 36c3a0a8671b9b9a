// Copyright 2026 The r2r Authors.
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

#include "r2r/attention.hpp"
#include "r2r/checkpoint.hpp"
#include "r2r/config.hpp"
#include "r2r/data.hpp"
#include "r2r/errors.hpp"
#include "r2r/explain.hpp"
#include "r2r/gradcheck.hpp"
#include "r2r/metrics.hpp"
#include "r2r/model.hpp"
#include "r2r/ops.hpp"
#include "r2r/optim.hpp"
#include "r2r/parallel.hpp"
#include "r2r/report.hpp"
#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"
#include "r2r/train.hpp"
