// Copyright 2026 The blockrag Authors
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

#include <stdexcept>
#include <string>

namespace blockrag {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or variant combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A record, entity or predicate id that does not resolve.
class LookupError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent input file. Messages carry file and line.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Operation called outside its precondition (empty block, zero pairs, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Vector index misuse: dimension mismatch, duplicate item id.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Violated data invariant such as duplicate decisions for one pair.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Remote endpoint failure after retries were exhausted.
class RemoteError : public Error {
public:
    using Error::Error;
};

}  // namespace blockrag
