//! C ABI over the tollflow solvers and simulator.
//!
//! Every function returns a [`TollflowStatus`]. On failure the message is
//! available from [`tollflow_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! `TOLLFLOW_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tollflow::dynamics::{DemandModel, SimConfig, SimState};
use tollflow::equilibrium::{solve_equilibrium_toll, solve_sue, EquilibriumParams};
use tollflow::error::Error;
use tollflow::network::{LatencySpec, ParallelNetwork};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TollflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NoConvergence = 4,
    Panic = 5,
}

/// Parallel-link network.
pub struct TollflowNetwork {
    inner: ParallelNetwork,
}

/// Stochastic load/toll process with its own generator state.
pub struct TollflowSimulation {
    config: SimConfig,
    state: SimState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TollflowStatus {
    match err {
        Error::Shape { .. } | Error::LinkIndex { .. } => TollflowStatus::ShapeMismatch,
        Error::NoConvergence { .. } | Error::Bracket { .. } | Error::Integration { .. } => {
            TollflowStatus::NoConvergence
        }
        _ => TollflowStatus::InvalidArgument,
    }
}

fn guard<F>(f: F) -> TollflowStatus
where
    F: FnOnce() -> Result<(), TollflowStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TollflowStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            TollflowStatus::Panic
        }
    }
}

fn check<T>(r: tollflow::error::Result<T>) -> Result<T, TollflowStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), TollflowStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        Err(TollflowStatus::NullPointer)
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable doubles.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], TollflowStatus> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable doubles.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], TollflowStatus> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(len: usize, links: usize) -> Result<(), TollflowStatus> {
    check(if len == links {
        Ok(())
    } else {
        Err(Error::Shape { expected: links, actual: len })
    })
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn tollflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tollflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Network whose link `i` (1-based) has latency `i x² + i`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tollflow_network_quadratic(links: usize, out: *mut *mut TollflowNetwork) -> TollflowStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = check(ParallelNetwork::quadratic_family(links))?;
        *out = Box::into_raw(Box::new(TollflowNetwork { inner }));
        Ok(())
    })
}

/// Polynomial latencies from a row-major `links × (degree + 1)` table where
/// entry `[i][k]` is the coefficient of `x^k` on link `i`.
///
/// # Safety
/// `coefficients` must point to `links * (degree + 1)` doubles and `out` to a
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn tollflow_network_new(
    links: usize,
    degree: usize,
    coefficients: *const f64,
    out: *mut *mut TollflowNetwork,
) -> TollflowStatus {
    guard(|| {
        non_null(out, "out")?;
        let width = degree + 1;
        let table = slice(coefficients, links * width, "coefficients")?;
        let specs = table
            .chunks(width)
            .map(LatencySpec::from_coefficients)
            .collect::<tollflow::error::Result<Vec<_>>>();
        let inner = check(specs.and_then(ParallelNetwork::new))?;
        *out = Box::into_raw(Box::new(TollflowNetwork { inner }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from a `tollflow_network_*` constructor
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn tollflow_network_free(net: *mut TollflowNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of links, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn tollflow_network_links(net: *const TollflowNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.len())
}

/// Latency of link `link` (0-based) at load `x`.
///
/// # Safety
/// `net` must be a live network handle and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn tollflow_latency(
    net: *const TollflowNetwork,
    link: usize,
    x: f64,
    out: *mut f64,
) -> TollflowStatus {
    guard(|| {
        non_null(net, "net")?;
        non_null(out, "out")?;
        *out = check((*net).inner.latency(link, x))?;
        Ok(())
    })
}

/// Stochastic user equilibrium `x̄(p)` for demand `demand` at toll `toll`.
///
/// # Safety
/// `toll` and `out_load` must each point to `len` doubles, `len` equal to the
/// number of links.
#[no_mangle]
pub unsafe extern "C" fn tollflow_solve_sue(
    net: *const TollflowNetwork,
    beta: f64,
    demand: f64,
    toll: *const f64,
    out_load: *mut f64,
    len: usize,
) -> TollflowStatus {
    guard(|| {
        non_null(net, "net")?;
        let net = &(*net).inner;
        expect_len(len, net.len())?;
        let p = slice(toll, len, "toll")?;
        let out = slice_mut(out_load, len, "out_load")?;
        let params = check(EquilibriumParams::new(beta, demand))?;
        out.copy_from_slice(&check(solve_sue(net, p, &params))?);
        Ok(())
    })
}

/// Equilibrium toll `p̄`, its SUE `x̄(p̄)` and the social optimum. Any output
/// pointer may be null to skip it.
///
/// # Safety
/// Non-null outputs must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tollflow_solve_equilibrium(
    net: *const TollflowNetwork,
    beta: f64,
    demand: f64,
    out_load: *mut f64,
    out_toll: *mut f64,
    out_social: *mut f64,
    len: usize,
) -> TollflowStatus {
    guard(|| {
        non_null(net, "net")?;
        let net = &(*net).inner;
        expect_len(len, net.len())?;
        let params = check(EquilibriumParams::new(beta, demand))?;
        let sol = check(solve_equilibrium_toll(net, &params))?;
        for (dst, src) in [(out_load, &sol.sue_load), (out_toll, &sol.toll), (out_social, &sol.social_load)] {
            if !dst.is_null() {
                std::slice::from_raw_parts_mut(dst, len).copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Simulation from zero load and toll with uniform arrivals on
/// `[λ/2, 3λ/2]` and discharges centred on `μ`. The network is copied.
///
/// # Safety
/// `net` must be a live network handle and `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tollflow_simulation_new(
    net: *const TollflowNetwork,
    beta: f64,
    lambda: f64,
    mu: f64,
    toll_step: f64,
    seed: u64,
    out: *mut *mut TollflowSimulation,
) -> TollflowStatus {
    guard(|| {
        non_null(net, "net")?;
        non_null(out, "out")?;
        let demand = check(DemandModel::default_for(lambda, mu))?;
        let config = SimConfig::new((*net).inner.clone(), demand, beta, toll_step, usize::MAX, seed);
        let state = check(SimState::initial(&config))?;
        *out = Box::into_raw(Box::new(TollflowSimulation { config, state }));
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a live simulation handle.
#[no_mangle]
pub unsafe extern "C" fn tollflow_simulation_free(sim: *mut TollflowSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances the process by `steps` steps.
///
/// # Safety
/// `sim` must be a live simulation handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn tollflow_simulation_step(sim: *mut TollflowSimulation, steps: usize) -> TollflowStatus {
    guard(|| {
        non_null(sim, "sim")?;
        let sim = &mut *sim;
        for _ in 0..steps {
            sim.state.step(&sim.config);
        }
        Ok(())
    })
}

/// Copies the current load and toll and the step count. Any output may be null.
///
/// # Safety
/// Non-null `load`/`toll` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tollflow_simulation_state(
    sim: *const TollflowSimulation,
    load: *mut f64,
    toll: *mut f64,
    len: usize,
    step: *mut u64,
) -> TollflowStatus {
    guard(|| {
        non_null(sim, "sim")?;
        let sim = &*sim;
        expect_len(len, sim.state.load.len())?;
        if !load.is_null() {
            std::slice::from_raw_parts_mut(load, len).copy_from_slice(&sim.state.load);
        }
        if !toll.is_null() {
            std::slice::from_raw_parts_mut(toll, len).copy_from_slice(&sim.state.toll);
        }
        if !step.is_null() {
            *step = sim.state.n as u64;
        }
        Ok(())
    })
}
