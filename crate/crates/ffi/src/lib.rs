//! C ABI over `smclab`.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`SmclabStatus`]; results go
//!   through out-pointers. On failure, [`smclab_last_error`] describes the
//!   problem for the calling thread.
//! * Objects are opaque handles created by `*_new`/constructor functions and
//!   released with the matching `*_free`. Passing NULL to a free function is
//!   a no-op.
//! * Strings returned to C are owned by the caller and released with
//!   [`smclab_string_free`].
//! * Bit vectors cross the boundary as one byte per bit (0 or 1).
//! * Panics never cross the boundary; they surface as `SMCLAB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use smclab::asp::{fano_bound, AspError, SourceModel};
use smclab::infotheory::{
    conditional_entropy, entropy, pair_diagnostics, InfoError, JointDistribution, Variable,
};
use smclab::oneshot::{OutputDelivery, ProtocolId};
use smclab::polarsrc::{
    construct_exact, construct_monte_carlo, high_entropy_set, polar_transform, reconstruct,
    BitSequence, IndexSet, PolarError, PolarProfile,
};
use smclab::transcript::{analyze, AnalysisReport};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmclabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotPowerOfTwo = 3,
    Unnormalized = 4,
    TooLarge = 5,
    NotAdditivelyCorrelated = 6,
    ProtocolError = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A joint distribution over small finite alphabets.
pub struct SmclabDistribution(JointDistribution);

/// Result of an exact one-shot protocol analysis.
pub struct SmclabReport(AnalysisReport);

/// Per-index conditional entropies of a polarized Bernoulli source.
pub struct SmclabProfile(PolarProfile);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(SmclabStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(SmclabStatus::NullPointer, format!("{what} is NULL"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Failure(SmclabStatus::InvalidArgument, message.into())
    }
}

impl From<InfoError> for Failure {
    fn from(e: InfoError) -> Self {
        let status = match e {
            InfoError::Unnormalized(_) => SmclabStatus::Unnormalized,
            InfoError::TooLarge { .. } => SmclabStatus::TooLarge,
            _ => SmclabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<PolarError> for Failure {
    fn from(e: PolarError) -> Self {
        let status = match e {
            PolarError::NotPowerOfTwo(_) => SmclabStatus::NotPowerOfTwo,
            PolarError::TooLargeForExact { .. } => SmclabStatus::TooLarge,
            _ => SmclabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<AspError> for Failure {
    fn from(e: AspError) -> Self {
        let status = match e {
            AspError::Polar(inner) => return inner.into(),
            AspError::Info(inner) => return inner.into(),
            AspError::NotAdditivelyCorrelated { .. } => SmclabStatus::NotAdditivelyCorrelated,
            AspError::TooLargeForExact { .. } => SmclabStatus::TooLarge,
            _ => SmclabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> SmclabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmclabStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmclabStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))
}

fn to_bits(bits: &[u8]) -> Result<BitSequence, Failure> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Failure::invalid("bit arrays must hold only 0 and 1"));
    }
    Ok(BitSequence::from_bits(bits))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message for the most recent failure on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn smclab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smclab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smclab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Dense table over variables `X1..Xk` with the given alphabet sizes,
/// row-major with the last variable fastest.
///
/// # Safety
/// `sizes` must point to `num_vars` values and `probabilities` to
/// `num_cells` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_distribution_new(
    sizes: *const usize,
    num_vars: usize,
    probabilities: *const f64,
    num_cells: usize,
    out: *mut *mut SmclabDistribution,
) -> SmclabStatus {
    guard(|| {
        let sizes = slice(sizes, num_vars, "sizes")?;
        let probs = slice(probabilities, num_cells, "probabilities")?;
        let vars = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| Variable::new(format!("X{}", i + 1), s))
            .collect();
        let dist = JointDistribution::new(vars, probs.to_vec())?;
        write(
            out,
            Box::into_raw(Box::new(SmclabDistribution(dist))),
            "out",
        )
    })
}

/// Distribution from its JSON description (explicit table or preset).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_distribution_from_json(
    json: *const c_char,
    out: *mut *mut SmclabDistribution,
) -> SmclabStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let dist: JointDistribution = serde_json::from_str(text)
            .map_err(|e| Failure::invalid(format!("distribution JSON: {e}")))?;
        write(
            out,
            Box::into_raw(Box::new(SmclabDistribution(dist))),
            "out",
        )
    })
}

/// # Safety
/// `dist` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smclab_distribution_free(dist: *mut SmclabDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

fn labels_at<'a>(
    dist: &'a JointDistribution,
    positions: &[usize],
) -> Result<Vec<&'a str>, Failure> {
    positions
        .iter()
        .map(|&i| {
            dist.variables()
                .get(i)
                .map(|v| v.name.as_str())
                .ok_or_else(|| Failure::invalid(format!("variable position {i} out of range")))
        })
        .collect()
}

/// Joint entropy in bits of the variables at `positions`.
///
/// # Safety
/// `dist` must be a live handle, `positions` must point to `count` values
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_entropy(
    dist: *const SmclabDistribution,
    positions: *const usize,
    count: usize,
    out: *mut f64,
) -> SmclabStatus {
    guard(|| {
        let d = &reference(dist, "dist")?.0;
        let labels = labels_at(d, slice(positions, count, "positions")?)?;
        write(out, entropy(d, &labels)?, "out")
    })
}

/// H(targets | given) in bits.
///
/// # Safety
/// As for [`smclab_entropy`], for both position arrays.
#[no_mangle]
pub unsafe extern "C" fn smclab_conditional_entropy(
    dist: *const SmclabDistribution,
    targets: *const usize,
    num_targets: usize,
    given: *const usize,
    num_given: usize,
    out: *mut f64,
) -> SmclabStatus {
    guard(|| {
        let d = &reference(dist, "dist")?.0;
        let t = labels_at(d, slice(targets, num_targets, "targets")?)?;
        let g = labels_at(d, slice(given, num_given, "given")?)?;
        write(out, conditional_entropy(d, &t, &g)?, "out")
    })
}

/// Additive-correlation gap H(a, b) - 2 H(a xor b) of two binary variables.
///
/// # Safety
/// `dist` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_additive_gap(
    dist: *const SmclabDistribution,
    a: usize,
    b: usize,
    out: *mut f64,
) -> SmclabStatus {
    guard(|| {
        let d = &reference(dist, "dist")?.0;
        let labels = labels_at(d, &[a, b])?;
        write(out, pair_diagnostics(d, labels[0], labels[1])?.gap, "out")
    })
}

/// Exact analysis of a built-in protocol under uniform inputs.
/// `modulus` 0 selects the default; `broadcast` nonzero sends the result
/// back to every party.
///
/// # Safety
/// `protocol` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_oneshot_analyze(
    protocol: *const c_char,
    m: usize,
    modulus: u64,
    broadcast: i32,
    out: *mut *mut SmclabReport,
) -> SmclabStatus {
    guard(|| {
        let id: ProtocolId = c_str(protocol, "protocol")?
            .parse()
            .map_err(|e: smclab::oneshot::OneShotError| Failure::invalid(e.to_string()))?;
        let delivery = if broadcast != 0 {
            OutputDelivery::BroadcastBack
        } else {
            OutputDelivery::ComputingPartyOnly
        };
        let built = id
            .build(m, (modulus != 0).then_some(modulus), delivery)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        let report = analyze(&built.spec, &built.targets, None)
            .map_err(|e| Failure(SmclabStatus::ProtocolError, e.to_string()))?;
        write(out, Box::into_raw(Box::new(SmclabReport(report))), "out")
    })
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smclab_report_free(report: *mut SmclabReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_report_randomness_cost(
    report: *const SmclabReport,
    out: *mut f64,
) -> SmclabStatus {
    guard(|| write(out, reference(report, "report")?.0.randomness_cost, "out"))
}

/// Writes 1 if every party passes accuracy and security, else 0.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_report_all_pass(
    report: *const SmclabReport,
    out: *mut i32,
) -> SmclabStatus {
    guard(|| {
        write(
            out,
            i32::from(reference(report, "report")?.0.all_pass),
            "out",
        )
    })
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_report_security_residual(
    report: *const SmclabReport,
    party: usize,
    out: *mut f64,
) -> SmclabStatus {
    guard(|| {
        let r = &reference(report, "report")?.0;
        let res = r
            .residuals
            .get(party)
            .ok_or_else(|| Failure::invalid(format!("party {party} out of range")))?;
        write(out, res.security_residual, "out")
    })
}

/// The report as JSON; free with [`smclab_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_report_to_json(
    report: *const SmclabReport,
    out: *mut *mut c_char,
) -> SmclabStatus {
    guard(|| {
        write(
            out,
            into_c_string(reference(report, "report")?.0.to_json()),
            "out",
        )
    })
}

/// `out = bits G_n`; `n` must be a power of two. `bits` and `out` may alias.
///
/// # Safety
/// `bits` and `out` must each point to `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn smclab_polar_transform(
    bits: *const u8,
    n: usize,
    out: *mut u8,
) -> SmclabStatus {
    guard(|| {
        let input = to_bits(slice(bits, n, "bits")?)?;
        let transformed = polar_transform(&input)?.to_bits();
        slice_mut(out, n, "out")?.copy_from_slice(&transformed);
        Ok(())
    })
}

/// Exact profile by enumeration (n <= 16).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_profile_exact(
    p: f64,
    n: usize,
    out: *mut *mut SmclabProfile,
) -> SmclabStatus {
    guard(|| {
        let profile = construct_exact(p, n)?;
        write(out, Box::into_raw(Box::new(SmclabProfile(profile))), "out")
    })
}

/// Monte Carlo profile.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_profile_monte_carlo(
    p: f64,
    n: usize,
    samples: usize,
    seed: u64,
    out: *mut *mut SmclabProfile,
) -> SmclabStatus {
    guard(|| {
        let profile = construct_monte_carlo(p, n, samples, seed)?;
        write(out, Box::into_raw(Box::new(SmclabProfile(profile))), "out")
    })
}

/// # Safety
/// `profile` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smclab_profile_free(profile: *mut SmclabProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Copies the n entropies into `out` (capacity `len`).
///
/// # Safety
/// `profile` must be a live handle and `out` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn smclab_profile_entropies(
    profile: *const SmclabProfile,
    out: *mut f64,
    len: usize,
) -> SmclabStatus {
    guard(|| {
        let p = &reference(profile, "profile")?.0;
        if len < p.n {
            return Err(Failure(
                SmclabStatus::BufferTooSmall,
                format!("need {} values, got {len}", p.n),
            ));
        }
        slice_mut(out, p.n, "out")?.copy_from_slice(&p.entropies);
        Ok(())
    })
}

/// Zero-based indices with entropy >= epsilon, ascending. `count` always
/// receives the set size; `indices` (capacity `cap`) may be NULL to query it.
///
/// # Safety
/// `profile` must be a live handle, `count` writable, and `indices` NULL or
/// pointing to `cap` values.
#[no_mangle]
pub unsafe extern "C" fn smclab_profile_high_entropy_set(
    profile: *const SmclabProfile,
    epsilon: f64,
    indices: *mut usize,
    cap: usize,
    count: *mut usize,
) -> SmclabStatus {
    guard(|| {
        let set = high_entropy_set(&reference(profile, "profile")?.0, epsilon)?;
        write(count, set.len(), "count")?;
        if indices.is_null() {
            return Ok(());
        }
        if cap < set.len() {
            return Err(Failure(
                SmclabStatus::BufferTooSmall,
                format!("need {} indices, got {cap}", set.len()),
            ));
        }
        slice_mut(indices, set.len(), "indices")?.copy_from_slice(&set.indices);
        Ok(())
    })
}

/// Successive cancellation: `known[k]` is the transformed bit at
/// `indices[k]`; writes the n-bit estimate of the *source* sequence.
///
/// # Safety
/// `known` and `indices` must point to `count` values, `out` to `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn smclab_sc_reconstruct(
    known: *const u8,
    indices: *const usize,
    count: usize,
    n: usize,
    p: f64,
    out: *mut u8,
) -> SmclabStatus {
    guard(|| {
        let set = IndexSet::new(n, slice(indices, count, "indices")?.to_vec(), 0.0)?;
        if set.len() != count {
            return Err(Failure::invalid("indices must be distinct"));
        }
        let mut pairs: Vec<(usize, u8)> = slice(indices, count, "indices")?
            .iter()
            .copied()
            .zip(slice(known, count, "known")?.iter().copied())
            .collect();
        pairs.sort_unstable();
        let ordered: Vec<u8> = pairs.into_iter().map(|(_, b)| b).collect();
        let source = reconstruct(&to_bits(&ordered)?, &set, p)?.to_bits();
        slice_mut(out, n, "out")?.copy_from_slice(&source);
        Ok(())
    })
}

/// Fano lower bounds for a three-bit source model: the finite-n value for
/// `r_size` transmitted bits and the asymptotic value.
///
/// # Safety
/// `dist` must be a live handle and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn smclab_fano_bound(
    dist: *const SmclabDistribution,
    n: usize,
    r_size: usize,
    finite: *mut f64,
    asymptotic: *mut f64,
) -> SmclabStatus {
    guard(|| {
        let model = SourceModel::new(reference(dist, "dist")?.0.clone())?;
        let bound = fano_bound(&model, n, r_size)?;
        write(finite, bound.finite, "finite")?;
        write(asymptotic, bound.asymptotic, "asymptotic")
    })
}
