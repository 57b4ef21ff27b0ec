// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "moeadapter/adapter.hpp"
#include "moeadapter/adapter_config.hpp"
#include "moeadapter/analysis.hpp"
#include "moeadapter/conflict_lab.hpp"
#include "moeadapter/container.hpp"
#include "moeadapter/dataset_io.hpp"
#include "moeadapter/error.hpp"
#include "moeadapter/grad_check.hpp"
#include "moeadapter/json_io.hpp"
#include "moeadapter/kernels.hpp"
#include "moeadapter/objectives.hpp"
#include "moeadapter/optim.hpp"
#include "moeadapter/random.hpp"
#include "moeadapter/run_config.hpp"
#include "moeadapter/tape.hpp"
#include "moeadapter/tensor.hpp"
#include "moeadapter/trainer.hpp"
