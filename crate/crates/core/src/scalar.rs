//! Floating-point abstraction shared by the fusion math.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for probabilities, statistics and embeddings: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`. Exact for `f64`, round-to-nearest for `f32`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Bit pattern widened to 64 bits, used for hashing values into PRNG streams.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Serde adapter for scalars that may legitimately be non-finite (an infinite
/// threshold multiplier disables truncation). JSON has no encoding for those,
/// so they are written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod nonfinite {
    use super::Scalar;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Scalar, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        let x = *v;
        if x.is_finite() {
            v.serialize(s)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > T::zero() {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Num(T),
        Str(String),
    }

    pub fn deserialize<'de, T: Scalar, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        match Repr::<T>::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(T::infinity()),
                "-inf" => Ok(T::neg_infinity()),
                "nan" => Ok(T::nan()),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number or inf/-inf/nan, got {other:?}"
                ))),
            },
        }
    }
}
