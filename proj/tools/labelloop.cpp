// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#include "labelloop/cli.hpp"

int main(int argc, char** argv) { return labelloop::cli::run_cli(argc, argv); }
