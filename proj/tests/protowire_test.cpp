#include <gtest/gtest.h>

#include "cxlsim/protowire.hpp"
#include "test_support.hpp"

using namespace cxlsim;
using namespace cxlsim::wire;
using Bytes = std::vector<std::uint8_t>;

TEST(Varint, HandDerivedVectors) {
  EXPECT_EQ(varint_encode(0), (Bytes{0x00}));
  EXPECT_EQ(varint_encode(1), (Bytes{0x01}));
  EXPECT_EQ(varint_encode(127), (Bytes{0x7f}));
  EXPECT_EQ(varint_encode(128), (Bytes{0x80, 0x01}));
  EXPECT_EQ(varint_encode(300), (Bytes{0xAC, 0x02}));
  EXPECT_EQ(varint_encode(~0ULL).size(), 10u);
  EXPECT_EQ(varint_size(300), 2u);
}

TEST(Varint, DecodeReportsConsumed) {
  const Bytes b{0xAC, 0x02, 0x55};
  const auto r = varint_decode(b);
  EXPECT_EQ(r.value, 300u);
  EXPECT_EQ(r.consumed, 2u);
}

TEST(Varint, TruncatedAndMalformed) {
  const Bytes trunc{0x80, 0x80};
  try {
    varint_decode(trunc, 10);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.kind(), DecodeError::Kind::Truncated);
  }
  const Bytes runaway(11, 0xff);
  try {
    varint_decode(runaway, 3);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.kind(), DecodeError::Kind::MalformedVarint);
    EXPECT_EQ(e.offset(), 3u);
  }
  EXPECT_THROW(varint_decode(Bytes{}), DecodeError);
}

TEST(Varint, SeededRoundtrip) {
  RandomStream r(9, "varint");
  for (int i = 0; i < 100000; ++i) {
    const auto v = fixtures::random_varint_value(r);
    const auto enc = varint_encode(v);
    ASSERT_EQ(enc.size(), varint_size(v));
    const auto dec = varint_decode(enc);
    ASSERT_EQ(dec.value, v);
    ASSERT_EQ(dec.consumed, enc.size());
  }
}

namespace {

RpcSchema one_field(WireType w, FieldKind k) {
  RpcSchema s;
  s.types.push_back({"M", {{1, w, k, 0}}});
  return s;
}

}  // namespace

TEST(Codec, KeyBytes) {
  const RpcSchema s = one_field(WireType::Varint, FieldKind::Scalar);
  Message m;
  m.fields.push_back(Field{1, 0, {}, {}});
  EXPECT_EQ(encode_message(m, s).bytes, (Bytes{0x08, 0x00}));
}

TEST(Codec, EmptyMessageIsEmptyBuffer) {
  const RpcSchema s = one_field(WireType::Varint, FieldKind::Scalar);
  EXPECT_TRUE(encode_message(Message{}, s).bytes.empty());
  EXPECT_EQ(decode_message(WireBuffer{}, s), Message{});
}

TEST(Codec, NestedFieldTwoOfLengthFive) {
  RpcSchema s;
  s.types.push_back({"Outer", {{2, WireType::LengthDelimited, FieldKind::Nested, 1}}});
  s.types.push_back({"Inner", {{1, WireType::LengthDelimited, FieldKind::Bytes, 0}}});
  Message inner;
  inner.type = 1;
  inner.fields.push_back(Field{1, 0, "abc", {}});
  Message outer;
  Field f;
  f.number = 2;
  f.sub.push_back(inner);
  outer.fields.push_back(f);
  const auto w = encode_message(outer, s);
  EXPECT_EQ(w.bytes, (Bytes{0x12, 0x05, 0x0a, 0x03, 'a', 'b', 'c'}));
  EXPECT_EQ(decode_message(w, s), outer);
}

TEST(Codec, FixedWidthLittleEndian) {
  const RpcSchema s = one_field(WireType::Fixed32, FieldKind::Scalar);
  Message m;
  m.fields.push_back(Field{1, 0x01020304, {}, {}});
  EXPECT_EQ(encode_message(m, s).bytes, (Bytes{0x0d, 0x04, 0x03, 0x02, 0x01}));
}

TEST(Codec, SeededMessageRoundtrip) {
  const RpcSchema s = fixtures::codec_schema();
  s.validate();
  RandomStream r(5, "codec");
  for (int i = 0; i < 20000; ++i) {
    const Message m = fixtures::random_message(s, 0, r);
    const auto w = encode_message(m, s);
    ASSERT_EQ(w.size(), encoded_size(m, s));
    ASSERT_EQ(decode_message(w, s), m);
  }
}

TEST(Codec, StrictDecodeErrors) {
  const RpcSchema s = fixtures::codec_schema();
  auto kind_of = [&](const Bytes& b) {
    try {
      decode_message(WireBuffer{b}, s);
    } catch (const DecodeError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "decode accepted invalid bytes";
    return DecodeError::Kind::BadWireType;
  };
  EXPECT_EQ(kind_of({0x30, 0x01}), DecodeError::Kind::UnknownField);         // field 6
  EXPECT_EQ(kind_of({0x08, 0x01, 0x08, 0x02}), DecodeError::Kind::DuplicateField);
  EXPECT_EQ(kind_of({0x09, 0, 0, 0, 0, 0, 0, 0, 0}), DecodeError::Kind::WireTypeMismatch);
  EXPECT_EQ(kind_of({0x1a, 0x05, 'a'}), DecodeError::Kind::Truncated);
  EXPECT_EQ(kind_of({0x0b}), DecodeError::Kind::BadWireType);
  EXPECT_EQ(kind_of({0x08, 0x80}), DecodeError::Kind::Truncated);
}

TEST(Codec, DepthLimit) {
  RpcSchema s;
  s.types.push_back({"A", {{1, WireType::LengthDelimited, FieldKind::Nested, 1}}});
  s.types.push_back({"B", {{1, WireType::LengthDelimited, FieldKind::Nested, 2}}});
  s.types.push_back({"C", {{1, WireType::Varint, FieldKind::Scalar, 0}}});
  s.max_depth = 2;
  Message c;
  c.type = 2;
  c.fields.push_back(Field{1, 7, {}, {}});
  Message b;
  b.type = 1;
  b.fields.push_back(Field{1, 0, {}, {c}});
  Message a;
  a.fields.push_back(Field{1, 0, {}, {b}});
  EXPECT_EQ(message_depth(a), 3u);
  EXPECT_EQ(field_count(a), 3u);
  const auto w = encode_message(a, s);
  try {
    decode_message(w, s);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.kind(), DecodeError::Kind::DepthExceeded);
  }
  s.max_depth = 3;
  EXPECT_EQ(decode_message(w, s), a);
}

TEST(Codec, EncodeRejectsUnresolvableNested) {
  const RpcSchema s = fixtures::codec_schema();
  Message m;
  m.fields.push_back(Field{2, 0, {}, {}});
  EXPECT_THROW(encode_message(m, s), EncodeError);
  Message bad;
  bad.fields.push_back(Field{9, 0, {}, {}});
  EXPECT_THROW(encode_message(bad, s), EncodeError);
}

TEST(Schema, ValidateRejectsBadTables) {
  RpcSchema dup;
  dup.types.push_back({"M", {{1, WireType::Varint, FieldKind::Scalar, 0},
                             {1, WireType::Varint, FieldKind::Scalar, 0}}});
  EXPECT_THROW(dup.validate(), EncodeError);
  RpcSchema cyc;
  cyc.types.push_back({"A", {{1, WireType::LengthDelimited, FieldKind::Nested, 1}}});
  cyc.types.push_back({"B", {{1, WireType::LengthDelimited, FieldKind::Nested, 0}}});
  EXPECT_THROW(cyc.validate(), EncodeError);
  EXPECT_EQ(fixtures::codec_schema().nesting_depth(0), 3u);
}

TEST(Codec, DecodeEventsFollowWireOrder) {
  const RpcSchema s = fixtures::codec_schema();
  Message leaf;
  leaf.type = 2;
  leaf.fields.push_back(Field{2, 0, "xy", {}});
  Message mid;
  mid.type = 1;
  mid.fields.push_back(Field{3, 0, {}, {leaf}});
  Message root;
  root.fields.push_back(Field{1, 5, {}, {}});
  root.fields.push_back(Field{2, 0, {}, {mid}});
  const auto ev = decode_events(encode_message(root, s), s);
  using K = DecodeEvent::Kind;
  std::vector<K> kinds;
  for (const auto& e : ev) kinds.push_back(e.kind);
  EXPECT_EQ(kinds, (std::vector<K>{K::Scalar, K::BeginNested, K::BeginNested, K::Bytes,
                                   K::EndNested, K::EndNested}));
  EXPECT_EQ(ev[3].payload_bytes, 2u);
  EXPECT_EQ(ev[0].depth, 1u);
  EXPECT_EQ(ev[3].depth, 3u);
}
