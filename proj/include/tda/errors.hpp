#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tda {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input outside the mathematical domain of an operation (e.g. t outside [0,1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Malformed artifact file. Carries the byte offset at which decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " at training step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step)
      : Error(what + " at unlearning step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// A pipeline command needs an artifact that has not been produced yet.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(const std::string& artifact, const std::string& producer)
      : Error("missing artifact '" + artifact + "'; run `" + producer + "` first"),
        artifact_(artifact),
        producer_(producer) {}
  const std::string& artifact() const noexcept { return artifact_; }
  const std::string& producer() const noexcept { return producer_; }

 private:
  std::string artifact_;
  std::string producer_;
};

}  // namespace tda
