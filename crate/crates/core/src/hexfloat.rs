//! Exact text encoding of `f64` values as C99-style hexadecimal floats
//! (`0x1.8p+1`, `-0x0.0000000000001p-1022`, `inf`, `nan`).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid hexadecimal float {0:?}")]
pub struct HexFloatError(pub String);

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 {
        (0, -1022)
    } else {
        (1, exp - 1023)
    };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() {
        String::new()
    } else {
        format!(".{digits}")
    };
    let esign = if e < 0 { '-' } else { '+' };
    format!("{sign}0x{lead}{frac}p{esign}{}", e.abs())
}

pub fn parse(s: &str) -> Result<f64, HexFloatError> {
    let err = || HexFloatError(s.to_string());
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let apply = |v: f64| if neg { -v } else { v };
    match body {
        "inf" => return Ok(apply(f64::INFINITY)),
        "nan" => return Ok(f64::NAN),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(err)?;
    let (mantissa, exponent) = body.split_once(['p', 'P']).ok_or_else(err)?;
    let exponent: i64 = exponent.parse().map_err(|_| err())?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if lead != "0" && lead != "1" || frac.len() > 13 {
        return Err(err());
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).map_err(|_| err())? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "0" if frac_bits == 0 => 0,
        "0" if exponent == -1022 => frac_bits,
        "1" if (-1022..=1023).contains(&exponent) => (((exponent + 1023) as u64) << 52) | frac_bits,
        _ => return Err(err()),
    };
    Ok(apply(f64::from_bits(bits)))
}
