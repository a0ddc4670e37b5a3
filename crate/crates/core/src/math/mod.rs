//! Field, curve and pairing arithmetic underneath the credential scheme.
//!
//! Everything in here is internal; the public signature API lives in
//! [`crate::crypto`].

mod fp;
mod fp2;
mod mont;

pub(crate) mod curve;
pub(crate) mod pairing;

pub(crate) use fp2::Fp2;
