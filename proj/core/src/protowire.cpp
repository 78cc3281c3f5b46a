#include "cxlsim/protowire.hpp"

#include <algorithm>
#include <functional>

namespace cxlsim::wire {

namespace {

const char* kind_name(DecodeError::Kind k) {
  switch (k) {
    case DecodeError::Kind::MalformedVarint: return "malformed varint";
    case DecodeError::Kind::Truncated: return "truncated input";
    case DecodeError::Kind::WireTypeMismatch: return "wire type mismatch";
    case DecodeError::Kind::UnknownField: return "unknown field";
    case DecodeError::Kind::DuplicateField: return "duplicate field";
    case DecodeError::Kind::DepthExceeded: return "nesting depth exceeded";
    case DecodeError::Kind::BadWireType: return "unsupported wire type";
  }
  return "decode error";
}

bool valid_wire_type(std::uint64_t wt) {
  return wt == 0 || wt == 1 || wt == 2 || wt == 5;
}

void put_fixed(std::uint64_t v, int n, std::vector<std::uint8_t>& out) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t key_of(const FieldSpec& f) {
  return (static_cast<std::uint64_t>(f.number) << 3) | static_cast<std::uint64_t>(f.wire);
}

}  // namespace

DecodeError::DecodeError(Kind kind, std::size_t offset, const std::string& what)
    : std::runtime_error(std::string(kind_name(kind)) + " at byte " +
                         std::to_string(offset) + (what.empty() ? "" : ": " + what)),
      kind_(kind),
      offset_(offset) {}

const FieldSpec* MessageType::find(std::uint32_t number) const {
  const int i = index_of(number);
  return i < 0 ? nullptr : &fields[static_cast<std::size_t>(i)];
}

int MessageType::index_of(std::uint32_t number) const {
  auto it = std::lower_bound(fields.begin(), fields.end(), number,
                             [](const FieldSpec& f, std::uint32_t n) { return f.number < n; });
  if (it == fields.end() || it->number != number) return -1;
  return static_cast<int>(it - fields.begin());
}

void RpcSchema::validate() const {
  if (root >= types.size()) throw EncodeError("schema root type out of range");
  for (const MessageType& t : types) {
    for (std::size_t i = 0; i < t.fields.size(); ++i) {
      const FieldSpec& f = t.fields[i];
      if (f.number == 0 || f.number > (1u << 29) - 1) {
        throw EncodeError("field number out of range in " + t.name);
      }
      if (i > 0 && t.fields[i - 1].number >= f.number) {
        throw EncodeError("field numbers must be unique and ascending in " + t.name);
      }
      const bool ld = f.wire == WireType::LengthDelimited;
      if ((f.kind != FieldKind::Scalar) != ld) {
        throw EncodeError("field kind does not match wire type in " + t.name);
      }
      if (f.kind == FieldKind::Nested && f.nested_type >= types.size()) {
        throw EncodeError("nested type out of range in " + t.name);
      }
    }
  }
  // Acyclic: every chain must terminate within types.size() hops.
  for (std::uint32_t t = 0; t < types.size(); ++t) {
    if (nesting_depth(t) > types.size()) throw EncodeError("cyclic nesting in schema");
  }
}

std::uint32_t RpcSchema::nesting_depth(std::uint32_t type) const {
  std::vector<int> state(types.size(), 0);  // 0 new, 1 on stack, 2 done
  std::vector<std::uint32_t> memo(types.size(), 0);
  const auto limit = static_cast<std::uint32_t>(types.size() + 1);
  std::function<std::uint32_t(std::uint32_t)> go = [&](std::uint32_t t) -> std::uint32_t {
    if (state[t] == 1) return limit;  // cycle
    if (state[t] == 2) return memo[t];
    state[t] = 1;
    std::uint32_t best = 1;
    for (const FieldSpec& f : types[t].fields) {
      if (f.kind == FieldKind::Nested) {
        best = std::max(best, std::min(limit, 1 + go(f.nested_type)));
      }
    }
    state[t] = 2;
    memo[t] = best;
    return best;
  };
  return go(type);
}

bool operator==(const Field& a, const Field& b) {
  return a.number == b.number && a.u == b.u && a.bytes == b.bytes && a.sub == b.sub;
}

bool operator==(const Message& a, const Message& b) {
  return a.type == b.type && a.fields == b.fields;
}

// ---------------------------------------------------------------------------

void varint_encode(std::uint64_t v, std::vector<std::uint8_t>& out) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> varint_encode(std::uint64_t v) {
  std::vector<std::uint8_t> out;
  varint_encode(v, out);
  return out;
}

std::size_t varint_size(std::uint64_t v) {
  std::size_t n = 1;
  while (v >= 0x80) {
    v >>= 7;
    ++n;
  }
  return n;
}

VarintResult varint_decode(std::span<const std::uint8_t> in, std::size_t base_offset) {
  if (in.empty()) {
    throw DecodeError(DecodeError::Kind::Truncated, base_offset, "empty varint");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    if (i >= in.size()) {
      throw DecodeError(DecodeError::Kind::Truncated, base_offset + i, "varint");
    }
    const std::uint8_t b = in[i];
    v |= static_cast<std::uint64_t>(b & 0x7f) << (7 * i);
    if ((b & 0x80) == 0) return {v, i + 1};
  }
  throw DecodeError(DecodeError::Kind::MalformedVarint, base_offset,
                    "no terminator within 10 bytes");
}

// ---------------------------------------------------------------------------

namespace {

const FieldSpec& spec_for(const RpcSchema& schema, std::uint32_t type, const Field& f) {
  if (type >= schema.types.size()) throw EncodeError("message type out of range");
  const FieldSpec* spec = schema.types[type].find(f.number);
  if (spec == nullptr) {
    throw EncodeError("field " + std::to_string(f.number) + " not in type " +
                      schema.types[type].name);
  }
  if (spec->kind == FieldKind::Nested &&
      (f.sub.size() != 1 || f.sub.front().type != spec->nested_type)) {
    throw EncodeError("unresolvable nested reference at field " +
                      std::to_string(f.number));
  }
  return *spec;
}

std::size_t size_impl(const Message& m, const RpcSchema& schema) {
  std::size_t total = 0;
  for (const Field& f : m.fields) {
    const FieldSpec& spec = spec_for(schema, m.type, f);
    total += varint_size(key_of(spec));
    switch (spec.wire) {
      case WireType::Varint: total += varint_size(f.u); break;
      case WireType::Fixed64: total += 8; break;
      case WireType::Fixed32: total += 4; break;
      case WireType::LengthDelimited: {
        const std::size_t len = spec.kind == FieldKind::Nested
                                    ? size_impl(f.sub.front(), schema)
                                    : f.bytes.size();
        total += varint_size(len) + len;
        break;
      }
    }
  }
  return total;
}

void encode_impl(const Message& m, const RpcSchema& schema,
                 std::vector<std::uint8_t>& out) {
  for (const Field& f : m.fields) {
    const FieldSpec& spec = spec_for(schema, m.type, f);
    varint_encode(key_of(spec), out);
    switch (spec.wire) {
      case WireType::Varint: varint_encode(f.u, out); break;
      case WireType::Fixed64: put_fixed(f.u, 8, out); break;
      case WireType::Fixed32: put_fixed(f.u & 0xffffffffULL, 4, out); break;
      case WireType::LengthDelimited:
        if (spec.kind == FieldKind::Nested) {
          varint_encode(size_impl(f.sub.front(), schema), out);
          encode_impl(f.sub.front(), schema, out);
        } else {
          varint_encode(f.bytes.size(), out);
          out.insert(out.end(), f.bytes.begin(), f.bytes.end());
        }
        break;
    }
  }
}

struct Decoder {
  const RpcSchema& schema;
  std::vector<DecodeEvent>* events;

  Message run(std::span<const std::uint8_t> in, std::uint32_t type, std::uint32_t depth,
              std::size_t base) {
    if (depth > schema.max_depth) {
      throw DecodeError(DecodeError::Kind::DepthExceeded, base,
                        "depth " + std::to_string(depth));
    }
    const MessageType& mt = schema.types.at(type);
    Message m{type, {}};
    std::vector<bool> seen(mt.fields.size(), false);
    std::size_t pos = 0;
    while (pos < in.size()) {
      const std::size_t field_start = pos;
      const VarintResult key = varint_decode(in.subspan(pos), base + pos);
      pos += key.consumed;
      const std::uint64_t wt = key.value & 7;
      const std::uint64_t number = key.value >> 3;
      if (!valid_wire_type(wt)) {
        throw DecodeError(DecodeError::Kind::BadWireType, base + field_start,
                          "wire type " + std::to_string(wt));
      }
      const int idx = number > 0xffffffffULL
                          ? -1
                          : mt.index_of(static_cast<std::uint32_t>(number));
      if (idx < 0) {
        throw DecodeError(DecodeError::Kind::UnknownField, base + field_start,
                          "field " + std::to_string(number) + " in " + mt.name);
      }
      const FieldSpec& spec = mt.fields[static_cast<std::size_t>(idx)];
      if (static_cast<std::uint64_t>(spec.wire) != wt) {
        throw DecodeError(DecodeError::Kind::WireTypeMismatch, base + field_start,
                          "field " + std::to_string(number));
      }
      if (seen[static_cast<std::size_t>(idx)]) {
        throw DecodeError(DecodeError::Kind::DuplicateField, base + field_start,
                          "field " + std::to_string(number));
      }
      seen[static_cast<std::size_t>(idx)] = true;

      Field f;
      f.number = spec.number;
      const auto fidx = static_cast<std::uint32_t>(idx);
      switch (spec.wire) {
        case WireType::Varint: {
          const VarintResult v = varint_decode(in.subspan(pos), base + pos);
          pos += v.consumed;
          f.u = v.value;
          emit(DecodeEvent::Kind::Scalar, type, fidx, depth, pos - field_start, 8);
          break;
        }
        case WireType::Fixed64:
        case WireType::Fixed32: {
          const std::size_t n = spec.wire == WireType::Fixed64 ? 8 : 4;
          if (in.size() - pos < n) {
            throw DecodeError(DecodeError::Kind::Truncated, base + pos, "fixed field");
          }
          for (std::size_t i = 0; i < n; ++i) {
            f.u |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
          }
          pos += n;
          emit(DecodeEvent::Kind::Scalar, type, fidx, depth, pos - field_start, 8);
          break;
        }
        case WireType::LengthDelimited: {
          const VarintResult len = varint_decode(in.subspan(pos), base + pos);
          pos += len.consumed;
          if (in.size() - pos < len.value) {
            throw DecodeError(DecodeError::Kind::Truncated, base + pos,
                              "length-delimited field needs " +
                                  std::to_string(len.value) + " bytes");
          }
          const auto n = static_cast<std::size_t>(len.value);
          if (spec.kind == FieldKind::Nested) {
            emit(DecodeEvent::Kind::BeginNested, type, fidx, depth, pos - field_start, n);
            f.sub.push_back(run(in.subspan(pos, n), spec.nested_type, depth + 1, base + pos));
            pos += n;
            emit(DecodeEvent::Kind::EndNested, type, fidx, depth, 0, n);
          } else {
            f.bytes.assign(reinterpret_cast<const char*>(in.data() + pos), n);
            pos += n;
            emit(DecodeEvent::Kind::Bytes, type, fidx, depth, pos - field_start, n);
          }
          break;
        }
      }
      m.fields.push_back(std::move(f));
    }
    return m;
  }

  void emit(DecodeEvent::Kind k, std::uint32_t type, std::uint32_t idx, std::uint32_t depth,
            std::size_t wire_bytes, std::size_t payload) {
    if (events) events->push_back({k, type, idx, depth, wire_bytes, payload});
  }
};

}  // namespace

WireBuffer encode_message(const Message& m, const RpcSchema& schema) {
  WireBuffer w;
  w.bytes.reserve(size_impl(m, schema));
  encode_impl(m, schema, w.bytes);
  return w;
}

std::size_t encoded_size(const Message& m, const RpcSchema& schema) {
  return size_impl(m, schema);
}

Message decode_message(std::span<const std::uint8_t> bytes, const RpcSchema& schema,
                       std::uint32_t type) {
  Decoder d{schema, nullptr};
  return d.run(bytes, type, 1, 0);
}

Message decode_message(const WireBuffer& w, const RpcSchema& schema) {
  return decode_message(w.bytes, schema, schema.root);
}

std::vector<DecodeEvent> decode_events(const WireBuffer& w, const RpcSchema& schema) {
  std::vector<DecodeEvent> events;
  Decoder d{schema, &events};
  d.run(w.bytes, schema.root, 1, 0);
  return events;
}

std::uint32_t message_depth(const Message& m) {
  std::uint32_t best = 1;
  for (const Field& f : m.fields) {
    for (const Message& s : f.sub) best = std::max(best, 1 + message_depth(s));
  }
  return best;
}

std::size_t field_count(const Message& m) {
  std::size_t n = m.fields.size();
  for (const Field& f : m.fields) {
    for (const Message& s : f.sub) n += field_count(s);
  }
  return n;
}

}  // namespace cxlsim::wire
