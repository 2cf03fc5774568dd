/*
 * Copyright 2026 The flsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Umbrella header.

#pragma once

#include "flsim/aggregation.hpp"
#include "flsim/artifacts.hpp"
#include "flsim/client.hpp"
#include "flsim/common.hpp"
#include "flsim/compression.hpp"
#include "flsim/config.hpp"
#include "flsim/data.hpp"
#include "flsim/deployment.hpp"
#include "flsim/ledger.hpp"
#include "flsim/model.hpp"
#include "flsim/net.hpp"
#include "flsim/serialization.hpp"
#include "flsim/server.hpp"
#include "flsim/simulation.hpp"
#include "flsim/wire.hpp"
