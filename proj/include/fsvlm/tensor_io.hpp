/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "fsvlm/autograd.hpp"
#include "fsvlm/jsonl.hpp"

namespace fsvlm {

// Named float64 tensors plus a free-form JSON header.
//
// Layout: "FSVT" | u32 version | u64 header length | header JSON |
// little-endian float64 payload, tensors in header order.
struct TensorFile {
  Json header = Json::object();
  std::map<std::string, nn::Matrix> tensors;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace fsvlm
