// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

#include "platemark/error.hpp"

namespace platemark {

// Grammar violations, stable identifiers shared with API clients.
enum class PlateErrc {
  Empty,
  InvalidCharacter,
  OneLetterPrefix,
  TooManyLetters,
  LettersAfterDigits,
  NoDigits,
  TooManyDigits,
  LeadingZero,
};

inline const char* plate_errc_code(PlateErrc e) {
  switch (e) {
    case PlateErrc::Empty: return "EMPTY";
    case PlateErrc::InvalidCharacter: return "INVALID_CHARACTER";
    case PlateErrc::OneLetterPrefix: return "ONE_LETTER_PREFIX";
    case PlateErrc::TooManyLetters: return "TOO_MANY_LETTERS";
    case PlateErrc::LettersAfterDigits: return "LETTERS_AFTER_DIGITS";
    case PlateErrc::NoDigits: return "NO_DIGITS";
    case PlateErrc::TooManyDigits: return "TOO_MANY_DIGITS";
    case PlateErrc::LeadingZero: return "LEADING_ZERO";
  }
  return "UNKNOWN";
}

inline const char* plate_errc_message(PlateErrc e) {
  switch (e) {
    case PlateErrc::Empty: return "plate is empty";
    case PlateErrc::InvalidCharacter: return "only letters A-Z and digits 0-9 are allowed";
    case PlateErrc::OneLetterPrefix: return "prefix must be two letters or absent";
    case PlateErrc::TooManyLetters: return "prefix must be two letters or absent";
    case PlateErrc::LettersAfterDigits: return "letters must come before the digits";
    case PlateErrc::NoDigits: return "at least one digit is required";
    case PlateErrc::TooManyDigits: return "at most four digits";
    case PlateErrc::LeadingZero: return "digits cannot start with 0";
  }
  return "invalid plate";
}

class PlateError : public DataError {
 public:
  explicit PlateError(PlateErrc code)
      : DataError(std::string("invalid plate: ") + plate_errc_message(code)), code_(code) {}
  PlateErrc code() const { return code_; }

 private:
  PlateErrc code_;
};

/// A validated Hong Kong traditional plate: optional two-letter prefix,
/// then one to four digits without a leading zero.
class Plate {
 public:
  const std::string& prefix() const { return prefix_; }
  const std::string& digits() const { return digits_; }
  bool has_prefix() const { return !prefix_.empty(); }

  /// "HK 1", "BC 6554", "138".
  std::string canonical() const { return has_prefix() ? prefix_ + " " + digits_ : digits_; }

  friend auto operator<=>(const Plate& a, const Plate& b) { return a.canonical() <=> b.canonical(); }
  friend bool operator==(const Plate& a, const Plate& b) {
    return a.prefix_ == b.prefix_ && a.digits_ == b.digits_;
  }

  static Plate make(std::string_view prefix, std::string_view digits) {
    if (!prefix.empty() && prefix.size() != 2) throw PlateError(prefix.size() == 1 ? PlateErrc::OneLetterPrefix : PlateErrc::TooManyLetters);
    for (char c : prefix)
      if (c < 'A' || c > 'Z') throw PlateError(PlateErrc::InvalidCharacter);
    if (digits.empty()) throw PlateError(PlateErrc::NoDigits);
    if (digits.size() > 4) throw PlateError(PlateErrc::TooManyDigits);
    for (char c : digits)
      if (c < '0' || c > '9') throw PlateError(PlateErrc::InvalidCharacter);
    if (digits[0] == '0') throw PlateError(PlateErrc::LeadingZero);
    Plate p;
    p.prefix_ = std::string(prefix);
    p.digits_ = std::string(digits);
    return p;
  }

 private:
  std::string prefix_;
  std::string digits_;
};

/// Case-insensitive parse; whitespace anywhere is ignored.
inline Plate parse_plate(std::string_view text) {
  std::string letters, digits;
  bool seen_any = false;
  for (char raw : text) {
    auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) continue;
    seen_any = true;
    if (c >= 'a' && c <= 'z') c = static_cast<unsigned char>(c - 'a' + 'A');
    if (c >= 'A' && c <= 'Z') {
      if (!digits.empty()) throw PlateError(PlateErrc::LettersAfterDigits);
      letters.push_back(char(c));
    } else if (c >= '0' && c <= '9') {
      digits.push_back(char(c));
    } else {
      throw PlateError(PlateErrc::InvalidCharacter);
    }
  }
  if (!seen_any) throw PlateError(PlateErrc::Empty);
  if (letters.size() == 1) throw PlateError(PlateErrc::OneLetterPrefix);
  if (letters.size() > 2) throw PlateError(PlateErrc::TooManyLetters);
  return Plate::make(letters, digits);
}

// ---------------------------------------------------------------------------
// Token encoding: 0 = pad, 1..10 = '0'..'9', 11..36 = 'A'..'Z'.

inline constexpr std::size_t kPlateLength = 6;
inline constexpr std::size_t kVocabSize = 37;
inline constexpr int kPadToken = 0;

using EncodedPlate = std::array<std::uint8_t, kPlateLength>;

inline std::uint8_t token_of(char c) {
  if (c >= '0' && c <= '9') return std::uint8_t(1 + (c - '0'));
  if (c >= 'A' && c <= 'Z') return std::uint8_t(11 + (c - 'A'));
  throw PlateError(PlateErrc::InvalidCharacter);
}

/// Prefix in positions 0-1, digits right-aligned in positions 2-5.
inline EncodedPlate encode_plate(const Plate& p) {
  EncodedPlate e{};
  if (p.has_prefix()) {
    e[0] = token_of(p.prefix()[0]);
    e[1] = token_of(p.prefix()[1]);
  }
  const std::string& d = p.digits();
  std::size_t start = kPlateLength - d.size();
  for (std::size_t i = 0; i < d.size(); ++i) e[start + i] = token_of(d[i]);
  return e;
}

inline Plate decode_plate(const EncodedPlate& e) {
  std::string prefix, digits;
  for (std::size_t i = 0; i < 2; ++i) {
    if (e[i] == kPadToken) continue;
    if (e[i] < 11 || e[i] > 36) throw PlateError(PlateErrc::InvalidCharacter);
    prefix.push_back(char('A' + e[i] - 11));
  }
  for (std::size_t i = 2; i < kPlateLength; ++i) {
    if (e[i] == kPadToken) {
      if (!digits.empty()) throw PlateError(PlateErrc::InvalidCharacter);
      continue;
    }
    if (e[i] < 1 || e[i] > 10) throw PlateError(PlateErrc::InvalidCharacter);
    digits.push_back(char('0' + e[i] - 1));
  }
  return Plate::make(prefix, digits);
}

// ---------------------------------------------------------------------------
// Auxiliary targets: 22 binary flags followed by 10 digit counts.

inline constexpr std::size_t kNumBinaryFeatures = 22;
inline constexpr std::size_t kNumAuxFeatures = 32;

enum AuxIndex : std::size_t {
  kRepeatedLetters, kNoLetters, kPrefixHK, kPrefixXX, kX00, kX000, kSymmetric, kContains13,
  kEquals911, kABAB, kAAAB, kABBB, kAABA, kABAA, kAAB, kABB, kABCD, kDCBA, kAA, kAAA, kAAAA,
  kAABB, kCount0,
};

inline constexpr std::array<std::string_view, kNumAuxFeatures> kAuxFeatureNames = {
    "repeated_letters", "no_letters", "prefix_HK", "prefix_XX", "x00", "x000", "symmetric",
    "contains_13", "equals_911", "abab", "aaab", "abbb", "aaba", "abaa", "aab", "abb", "abcd",
    "dcba", "aa", "aaa", "aaaa", "aabb", "count_0", "count_1", "count_2", "count_3", "count_4",
    "count_5", "count_6", "count_7", "count_8", "count_9"};

using AuxiliaryFeatures = std::array<int, kNumAuxFeatures>;

namespace detail {
inline bool consecutive_run(const std::string& d, int step) {
  if (d.size() != 4) return false;
  for (std::size_t i = 0; i + 1 < d.size(); ++i)
    if (d[i + 1] - d[i] != step) return false;
  return true;
}
}  // namespace detail

inline AuxiliaryFeatures aux_features(const Plate& p) {
  AuxiliaryFeatures f{};
  const std::string& pre = p.prefix();
  const std::string& d = p.digits();
  const std::size_t n = d.size();
  auto D = [&](std::size_t i) { return d[i]; };

  f[kRepeatedLetters] = pre.size() == 2 && pre[0] == pre[1];
  f[kNoLetters] = pre.empty();
  f[kPrefixHK] = pre == "HK";
  f[kPrefixXX] = pre == "XX";
  f[kX00] = n == 3 && d.ends_with("00");
  f[kX000] = n == 4 && d.ends_with("000");
  f[kSymmetric] = n >= 2 && std::equal(d.begin(), d.end(), d.rbegin());
  f[kContains13] = d.find("13") != std::string::npos;
  f[kEquals911] = d == "911";
  if (n == 4) {
    f[kABAB] = D(0) == D(2) && D(1) == D(3) && D(0) != D(1);
    f[kAAAB] = D(0) == D(1) && D(1) == D(2) && D(2) != D(3);
    f[kABBB] = D(0) != D(1) && D(1) == D(2) && D(2) == D(3);
    f[kAABA] = D(0) == D(1) && D(1) == D(3) && D(0) != D(2);
    f[kABAA] = D(0) == D(2) && D(2) == D(3) && D(0) != D(1);
    f[kAAAA] = D(0) == D(1) && D(1) == D(2) && D(2) == D(3);
    f[kAABB] = D(0) == D(1) && D(2) == D(3) && D(0) != D(2);
    f[kABCD] = detail::consecutive_run(d, +1);
    f[kDCBA] = detail::consecutive_run(d, -1);
  } else if (n == 3) {
    f[kAAB] = D(0) == D(1) && D(1) != D(2);
    f[kABB] = D(0) != D(1) && D(1) == D(2);
    f[kAAA] = D(0) == D(1) && D(1) == D(2);
  } else if (n == 2) {
    f[kAA] = D(0) == D(1);
  }
  for (char c : d) ++f[kCount0 + std::size_t(c - '0')];
  return f;
}

/// Table-3 evaluation patterns. Literal patterns match the digit string
/// exactly; template patterns use the structural definitions.
inline bool pattern_class(const Plate& p, std::string_view pattern) {
  const std::string& d = p.digits();
  if (pattern == "168" || pattern == "28" || pattern == "1314") return d == pattern;
  if (pattern == "abba") return d.size() == 4 && d[0] == d[3] && d[1] == d[2] && d[0] != d[1];
  if (pattern == "abcd") return detail::consecutive_run(d, +1);
  if (pattern == "aabb") return aux_features(p)[kAABB] == 1;
  throw ConfigError("unknown plate pattern: " + std::string(pattern));
}

inline constexpr std::array<std::string_view, 6> kEvaluationPatterns = {"168", "28", "1314",
                                                                        "abba", "abcd", "aabb"};

}  // namespace platemark
