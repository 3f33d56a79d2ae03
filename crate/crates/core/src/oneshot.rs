//! Concrete one-shot protocols: the XOR chain, the modular sum, and
//! three-party multiplication by additive shares.
//!
//! Parties are numbered from 0; the computing party of the chains is the
//! last one, `m - 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{EngineError, ProtocolBuilder, ProtocolSpec, TargetFunctions, Time, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OneShotError {
    #[error("protocol needs at least 3 parties, got {0}")]
    TooFewParties(usize),
    #[error("modulus {modulus} must exceed 1")]
    BadModulus { modulus: Value },
    #[error("unknown protocol `{0}` (expected xor-chain, modm-sum, mult3-naive or mult3-masked)")]
    UnknownProtocol(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A protocol together with the functions each party is meant to learn.
#[derive(Debug, Clone)]
pub struct OneShotProtocol {
    pub spec: ProtocolSpec,
    pub targets: TargetFunctions,
}

/// Whether the computing party returns the result to everyone in a final round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputDelivery {
    #[default]
    ComputingPartyOnly,
    BroadcastBack,
}

fn check_parties(m: usize) -> Result<(), OneShotError> {
    if m < 3 {
        Err(OneShotError::TooFewParties(m))
    } else {
        Ok(())
    }
}

/// Pad-and-relay chain shared by the XOR and modular-sum protocols, over
/// the group Z_modulus (modulus 2 is XOR).
///
/// Party 0 draws Z, sends Z to party m-1 and Z + x_0 to party 1 at t=2;
/// party k forwards the running sum plus x_k to party k+1 at t=2k; party
/// m-1 removes Z.
fn relay_chain(
    name: String,
    m: usize,
    modulus: Value,
    delivery: OutputDelivery,
) -> Result<ProtocolSpec, OneShotError> {
    check_parties(m)?;
    if modulus < 2 {
        return Err(OneShotError::BadModulus { modulus });
    }
    let last = m - 1;
    let mut b = ProtocolBuilder::new(name, m)
        .draw(1, 0, modulus)
        .send_value(2, 0, last, |c| c.draw(1))
        .send_value(2, 0, 1, move |c| Ok((c.draw(1)? + c.input()) % modulus));
    for k in 1..last {
        let t_in = 2 * k as Time;
        let target = k + 1;
        b = b.send_value(t_in + 2, k, target, move |c| {
            Ok((c.value_from(t_in, k - 1)? + c.input()) % modulus)
        });
    }
    let t_chain = 2 * (last as Time);
    let t_result = t_chain + 1;
    b = b.compute(t_result, last, "result", move |c| {
        let pad = c.value_from(2, 0)?;
        let running = c.value_from(t_chain, last - 1)?;
        Ok((running + c.input() + modulus - pad) % modulus)
    });
    b = match delivery {
        OutputDelivery::ComputingPartyOnly => b.horizon(t_result),
        OutputDelivery::BroadcastBack => {
            let t_back = t_result + 1;
            for p in 0..last {
                b = b.send_value(t_back, last, p, |c| c.local("result"));
                b = b.output(p, move |c| c.value_from(t_back, last));
            }
            b.horizon(t_back + 1)
        }
    };
    Ok(b.output(last, |c| c.local("result")).build()?)
}

fn chain_targets<F>(m: usize, delivery: OutputDelivery, f: F) -> TargetFunctions
where
    F: Fn(&[Value]) -> Value + Send + Sync + Clone + 'static,
{
    match delivery {
        OutputDelivery::ComputingPartyOnly => TargetFunctions::none(m).with(m - 1, f),
        OutputDelivery::BroadcastBack => TargetFunctions::all(m, f),
    }
}

/// XOR of all input bits, computed by the last party with one random bit.
pub fn build_xor_chain(
    m: usize,
    delivery: OutputDelivery,
) -> Result<OneShotProtocol, OneShotError> {
    let spec = relay_chain(format!("xor-chain(m={m})"), m, 2, delivery)?;
    let targets = chain_targets(m, delivery, |x: &[Value]| x.iter().fold(0, |a, v| a ^ v));
    Ok(OneShotProtocol { spec, targets })
}

/// Sum of input bits modulo `modulus` (default `m`), computed by the last
/// party with one random value in `0..modulus`.
///
/// With modulus `m` the all-ones input sums to `m`, which wraps to 0; pass
/// `Some(m + 1)` for the exact integer sum.
pub fn build_modm_sum(
    m: usize,
    modulus: Option<Value>,
    delivery: OutputDelivery,
) -> Result<OneShotProtocol, OneShotError> {
    let k = modulus.unwrap_or(m as Value);
    let spec = relay_chain(format!("modm-sum(m={m},mod={k})"), m, k, delivery)?;
    let targets = chain_targets(m, delivery, move |x: &[Value]| x.iter().sum::<Value>() % k);
    Ok(OneShotProtocol { spec, targets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingVariant {
    /// Components sent in the clear; leaks x_0 to party 2 when x_1's third share is 1.
    Naive,
    /// Both components padded with x_0(1) xor x_1(1), which cancels at party 2.
    Masked,
}

// Share bits of a 2-bit draw: bit 0 is share (1), bit 1 is share (2).
fn share1(r: Value) -> Value {
    r & 1
}

fn share2(r: Value) -> Value {
    (r >> 1) & 1
}

/// Product x_0 * x_1 among three parties using four random bits.
///
/// Parties 0 and 1 split their inputs into three F_2 shares, two of them
/// uniform (one 2-bit draw each). They swap their uniform shares at t=2 and
/// hand the third shares to party 2, which has no input. At t=4 each sends
/// its product component to party 2, which adds its own term x_0(3) x_1(3)
/// and returns the product to both at t=6.
pub fn build_multiplication(variant: MaskingVariant) -> Result<OneShotProtocol, OneShotError> {
    let masked = variant == MaskingVariant::Masked;
    let name = match variant {
        MaskingVariant::Naive => "mult3-naive",
        MaskingVariant::Masked => "mult3-masked",
    };
    let spec = ProtocolBuilder::new(name, 3)
        .input_alphabet(2, 1)
        .draw(1, 0, 4)
        .draw(1, 1, 4)
        .compute(1, 0, "share3", |c| {
            let r = c.draw(1)?;
            Ok(c.input() ^ share1(r) ^ share2(r))
        })
        .compute(1, 1, "share3", |c| {
            let r = c.draw(1)?;
            Ok(c.input() ^ share1(r) ^ share2(r))
        })
        .send_value(2, 0, 1, |c| c.draw(1))
        .send_value(2, 1, 0, |c| c.draw(1))
        .send_value(2, 0, 2, |c| c.local("share3"))
        .send_value(2, 1, 2, |c| c.local("share3"))
        // x_0 * (x_1(1) + x_1(2)) = sum over i in {1,2,3}, j in {1,2} of x_0(i) x_1(j)
        .compute(3, 0, "component", move |c| {
            let own = c.draw(1)?;
            let peer = c.value_from(2, 1)?;
            let component = c.input() & (share1(peer) ^ share2(peer));
            let pad = if masked {
                share1(own) ^ share1(peer)
            } else {
                0
            };
            Ok(component ^ pad)
        })
        // (x_0(1) + x_0(2)) * x_1(3)
        .compute(3, 1, "component", move |c| {
            let own = c.draw(1)?;
            let peer = c.value_from(2, 0)?;
            let component = (share1(peer) ^ share2(peer)) & c.local("share3")?;
            let pad = if masked {
                share1(peer) ^ share1(own)
            } else {
                0
            };
            Ok(component ^ pad)
        })
        .send_value(4, 0, 2, |c| c.local("component"))
        .send_value(4, 1, 2, |c| c.local("component"))
        .compute(5, 2, "result", |c| {
            let own_term = c.value_from(2, 0)? & c.value_from(2, 1)?;
            Ok(c.value_from(4, 0)? ^ c.value_from(4, 1)? ^ own_term)
        })
        .send_value(6, 2, 0, |c| c.local("result"))
        .send_value(6, 2, 1, |c| c.local("result"))
        .output(0, |c| c.value_from(6, 2))
        .output(1, |c| c.value_from(6, 2))
        .output(2, |c| c.local("result"))
        .horizon(7)
        .build()?;
    Ok(OneShotProtocol {
        spec,
        targets: TargetFunctions::all(3, |x: &[Value]| x[0] & x[1]),
    })
}

/// Protocol identifiers accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolId {
    XorChain,
    ModmSum,
    Mult3Naive,
    Mult3Masked,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [
        ProtocolId::XorChain,
        ProtocolId::ModmSum,
        ProtocolId::Mult3Naive,
        ProtocolId::Mult3Masked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::XorChain => "xor-chain",
            ProtocolId::ModmSum => "modm-sum",
            ProtocolId::Mult3Naive => "mult3-naive",
            ProtocolId::Mult3Masked => "mult3-masked",
        }
    }

    /// `m` is ignored by the fixed three-party multiplication protocols.
    pub fn build(
        self,
        m: usize,
        modulus: Option<Value>,
        delivery: OutputDelivery,
    ) -> Result<OneShotProtocol, OneShotError> {
        match self {
            ProtocolId::XorChain => build_xor_chain(m, delivery),
            ProtocolId::ModmSum => build_modm_sum(m, modulus, delivery),
            ProtocolId::Mult3Naive => build_multiplication(MaskingVariant::Naive),
            ProtocolId::Mult3Masked => build_multiplication(MaskingVariant::Masked),
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = OneShotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| OneShotError::UnknownProtocol(s.to_string()))
    }
}
