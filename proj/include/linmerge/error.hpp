// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace linmerge {

/// Base of every error thrown by the library. `kind()` names the category so the
/// CLI and reports can surface it without RTTI tricks.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string & what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string & kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define LINMERGE_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                       \
    public:                                                           \
        explicit Name(const std::string & what) : Error(#Name, what) {} \
    }

LINMERGE_DEFINE_ERROR(FormatError);
LINMERGE_DEFINE_ERROR(TruncationError);
LINMERGE_DEFINE_ERROR(DataError);
LINMERGE_DEFINE_ERROR(IoError);
LINMERGE_DEFINE_ERROR(CompatError);
LINMERGE_DEFINE_ERROR(CoeffError);
LINMERGE_DEFINE_ERROR(ConfigError);
LINMERGE_DEFINE_ERROR(BindError);
LINMERGE_DEFINE_ERROR(InputError);
LINMERGE_DEFINE_ERROR(PlanError);
LINMERGE_DEFINE_ERROR(SampleError);
LINMERGE_DEFINE_ERROR(DegenerateError);
LINMERGE_DEFINE_ERROR(NumericError);
LINMERGE_DEFINE_ERROR(ParamError);

#undef LINMERGE_DEFINE_ERROR

} // namespace linmerge
