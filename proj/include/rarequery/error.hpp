#pragma once

#include <stdexcept>
#include <string>

namespace rarequery {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
    using Error::Error;
};

struct ExtentMismatch : Error {
    using Error::Error;
};

struct GeometryError : Error {
    using Error::Error;
};

struct InfeasibleSite : Error {
    using Error::Error;
};

struct TilesetIoError : Error {
    using Error::Error;
};

struct VersionMismatch : TilesetIoError {
    using TilesetIoError::TilesetIoError;
};

struct TruncatedFile : TilesetIoError {
    using TilesetIoError::TilesetIoError;
};

struct DigestMismatch : TilesetIoError {
    using TilesetIoError::TilesetIoError;
};

struct TrainingDiverged : Error {
    TrainingDiverged(const std::string& what, std::size_t step) : Error(what), step(step) {}
    std::size_t step;
};

struct LabelerFailure : Error {
    using Error::Error;
};

}  // namespace rarequery
