//! C ABI over `dilemma-core`.
//!
//! Objects cross the boundary as opaque pointers created by a `*_new` or
//! `*_parse` function and released by the matching `*_free`. Every fallible
//! function returns a [`DlStatus`]; on failure a description is available
//! from [`dl_last_error_message`] on the same thread. Strings returned to the
//! caller must be released with [`dl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use dilemma_core::analytics::pca;
use dilemma_core::catalog::parse_catalog;
use dilemma_core::responsestore::ExportName;
use dilemma_core::session::SessionError;
use dilemma_core::voting::{tally, VoteChoice};
use dilemma_core::{DilemmaCatalog, GameContent, Group, PlayerId, Room};

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlStatus {
    DL_OK = 0,
    DL_NULL_POINTER = 1,
    DL_INVALID_ARGUMENT = 2,
    DL_PARSE_ERROR = 3,
    DL_ROOM_FULL = 4,
    DL_WRONG_PHASE = 5,
    DL_NOT_MEMBER = 6,
    DL_RANK_TOO_LOW = 7,
    DL_PANIC = 99,
}

/// A parsed dilemma catalog.
pub struct DlCatalog {
    inner: DilemmaCatalog,
}

/// A room in its lobby, using the built-in game content.
pub struct DlRoom {
    inner: Room,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: DlStatus, msg: impl Into<String>) -> DlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> DlStatus) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(DlStatus::DL_PANIC, "internal panic"),
    }
}

fn session_status(e: &SessionError) -> DlStatus {
    match e {
        SessionError::RoomFull => DlStatus::DL_ROOM_FULL,
        SessionError::WrongPhase { .. } => DlStatus::DL_WRONG_PHASE,
        SessionError::NotMember(_) => DlStatus::DL_NOT_MEMBER,
        _ => DlStatus::DL_INVALID_ARGUMENT,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses catalog CSV text (NUL-terminated UTF-8) into `*out`.
///
/// # Safety
/// `csv` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dl_catalog_parse(csv: *const c_char, out: *mut *mut DlCatalog) -> DlStatus {
    guard(|| {
        if csv.is_null() || out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let text = match CStr::from_ptr(csv).to_str() {
            Ok(t) => t,
            Err(e) => return fail(DlStatus::DL_PARSE_ERROR, e.to_string()),
        };
        match parse_catalog(text.as_bytes()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DlCatalog { inner }));
                DlStatus::DL_OK
            }
            Err(e) => fail(DlStatus::DL_PARSE_ERROR, e.to_string()),
        }
    })
}

/// # Safety
/// `catalog` must come from [`dl_catalog_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dl_catalog_free(catalog: *mut DlCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of dilemmas in `group` (0 for A, 1 for B).
///
/// # Safety
/// `catalog` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dl_catalog_group_count(catalog: *const DlCatalog, group: u8, out: *mut usize) -> DlStatus {
    guard(|| {
        if catalog.is_null() || out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let group = match group {
            0 => Group::A,
            1 => Group::B,
            g => return fail(DlStatus::DL_INVALID_ARGUMENT, format!("unknown group {g}")),
        };
        *out = (*catalog).inner.group_count(group);
        DlStatus::DL_OK
    })
}

/// Tallies `len` votes (0 like, 1 dislike, 2 other) into
/// `out[0..3]` = (positive, negative, other).
///
/// # Safety
/// `choices` must point to `len` bytes (or be NULL when `len` is 0) and
/// `out` to 3 writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn dl_tally(choices: *const u8, len: usize, out: *mut u32) -> DlStatus {
    guard(|| {
        if out.is_null() || (choices.is_null() && len > 0) {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let raw = if len == 0 { &[][..] } else { std::slice::from_raw_parts(choices, len) };
        let mut votes = Vec::with_capacity(len);
        for &c in raw {
            votes.push(match c {
                0 => VoteChoice::Like,
                1 => VoteChoice::Dislike,
                2 => VoteChoice::Other,
                other => return fail(DlStatus::DL_INVALID_ARGUMENT, format!("bad vote {other}")),
            });
        }
        let score = tally(&votes).as_array();
        ptr::copy_nonoverlapping(score.as_ptr(), out, 3);
        DlStatus::DL_OK
    })
}

/// Export file stem for `table` (1 or 2) at `now_ms`; `n < 0` omits the
/// part number. Release `*out` with [`dl_string_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dl_export_stem(table: u8, n: i64, now_ms: u64, out: *mut *mut c_char) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let n = match n {
            n if n < 0 => None,
            n => match u32::try_from(n) {
                Ok(n) => Some(n),
                Err(_) => return fail(DlStatus::DL_INVALID_ARGUMENT, "n out of range"),
            },
        };
        match ExportName::new(table, n, now_ms) {
            Ok(name) => {
                *out = CString::new(name.stem()).expect("stem has no nul").into_raw();
                DlStatus::DL_OK
            }
            Err(e) => fail(DlStatus::DL_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a room hosted by `host` using the built-in content.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dl_room_new(host: u32, seed: u64, out: *mut *mut DlRoom) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let content: Arc<GameContent> = Arc::new(dilemma_core::cli::builtin_content());
        let inner = Room::new(format!("ffi-{seed}"), PlayerId(host), content, seed);
        *out = Box::into_raw(Box::new(DlRoom { inner }));
        DlStatus::DL_OK
    })
}

/// # Safety
/// `room` must be a valid room pointer.
#[no_mangle]
pub unsafe extern "C" fn dl_room_join(room: *mut DlRoom, player: u32) -> DlStatus {
    guard(|| {
        if room.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null room");
        }
        match (*room).inner.join(PlayerId(player)) {
            Ok(()) => DlStatus::DL_OK,
            Err(e) => fail(session_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `room` must be a valid room pointer.
#[no_mangle]
pub unsafe extern "C" fn dl_room_leave(room: *mut DlRoom, player: u32) -> DlStatus {
    guard(|| {
        if room.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null room");
        }
        match (*room).inner.leave(PlayerId(player)) {
            Ok(()) => DlStatus::DL_OK,
            Err(e) => fail(session_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `room` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dl_room_member_count(room: *const DlRoom, out: *mut usize) -> DlStatus {
    guard(|| {
        if room.is_null() || out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        *out = (*room).inner.members().len();
        DlStatus::DL_OK
    })
}

/// # Safety
/// `room` must come from [`dl_room_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dl_room_free(room: *mut DlRoom) {
    if !room.is_null() {
        drop(Box::from_raw(room));
    }
}

/// Explained variance ratios of the first `k` principal components of the
/// row-major `n × d` matrix `data`, written to `out[0..k]`.
///
/// # Safety
/// `data` must point to `n * d` doubles and `out` to `k` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dl_pca_explained_variance(
    data: *const f64,
    n: usize,
    d: usize,
    k: usize,
    out: *mut f64,
) -> DlStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(DlStatus::DL_NULL_POINTER, "null argument");
        }
        let Some(len) = n.checked_mul(d) else {
            return fail(DlStatus::DL_INVALID_ARGUMENT, "n * d overflows");
        };
        let flat = std::slice::from_raw_parts(data, len);
        let rows: Vec<Vec<f64>> = flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect();
        match pca(&rows, k) {
            Ok(r) => {
                ptr::copy_nonoverlapping(r.explained_variance_ratio.as_ptr(), out, k);
                DlStatus::DL_OK
            }
            Err(e) => fail(DlStatus::DL_RANK_TOO_LOW, e.to_string()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(dl_last_error_message()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn tally_through_the_abi() {
        let mut out = [0u32; 3];
        let votes = [0u8, 0, 1];
        assert_eq!(unsafe { dl_tally(votes.as_ptr(), 3, out.as_mut_ptr()) }, DlStatus::DL_OK);
        assert_eq!(out, [2, 1, 0]);
        assert_eq!(
            unsafe { dl_tally([7u8].as_ptr(), 1, out.as_mut_ptr()) },
            DlStatus::DL_INVALID_ARGUMENT
        );
        assert!(last_error().contains("bad vote 7"));
    }

    #[test]
    fn null_pointers_rejected() {
        assert_eq!(
            unsafe { dl_tally(ptr::null(), 0, ptr::null_mut()) },
            DlStatus::DL_NULL_POINTER
        );
        unsafe {
            dl_catalog_free(ptr::null_mut());
            dl_room_free(ptr::null_mut());
            dl_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn room_capacity_and_codes() {
        let mut room = ptr::null_mut();
        unsafe {
            assert_eq!(dl_room_new(1, 5, &mut room), DlStatus::DL_OK);
            for p in 2..=6 {
                assert_eq!(dl_room_join(room, p), DlStatus::DL_OK);
            }
            assert_eq!(dl_room_join(room, 7), DlStatus::DL_ROOM_FULL);
            let mut n = 0usize;
            assert_eq!(dl_room_member_count(room, &mut n), DlStatus::DL_OK);
            assert_eq!(n, 6);
            assert_eq!(dl_room_leave(room, 42), DlStatus::DL_NOT_MEMBER);
            assert_eq!(dl_room_leave(room, 3), DlStatus::DL_OK);
            assert_eq!(dl_room_join(room, 7), DlStatus::DL_OK);
            dl_room_free(room);
        }
    }

    #[test]
    fn export_stem_round_trip() {
        let mut s = ptr::null_mut();
        unsafe {
            assert_eq!(dl_export_stem(1, -1, 1_747_749_787_000, &mut s), DlStatus::DL_OK);
            assert_eq!(CStr::from_ptr(s).to_str().unwrap(), "Db1Table1_20250520-140307");
            dl_string_free(s);
            assert_eq!(dl_export_stem(2, 3, 1_747_749_787_000, &mut s), DlStatus::DL_OK);
            assert_eq!(CStr::from_ptr(s).to_str().unwrap(), "Db1Table2_3_20250520-140307");
            dl_string_free(s);
        }
    }

    #[test]
    fn catalog_from_fixture() {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/catalog.csv")).unwrap();
        let c = CString::new(text).unwrap();
        let mut cat = ptr::null_mut();
        let mut n = 0usize;
        unsafe {
            assert_eq!(dl_catalog_parse(c.as_ptr(), &mut cat), DlStatus::DL_OK);
            assert_eq!(dl_catalog_group_count(cat, 0, &mut n), DlStatus::DL_OK);
            assert_eq!(n, 5);
            assert_eq!(dl_catalog_group_count(cat, 9, &mut n), DlStatus::DL_INVALID_ARGUMENT);
            dl_catalog_free(cat);
            let bad = CString::new("nonsense").unwrap();
            assert_eq!(dl_catalog_parse(bad.as_ptr(), &mut cat), DlStatus::DL_PARSE_ERROR);
        }
    }

    #[test]
    fn pca_ratios() {
        let data = [0.0, 0.0, 1.0, 0.1, 2.0, -0.1, 3.0, 0.0];
        let mut out = [0.0f64; 2];
        unsafe {
            assert_eq!(dl_pca_explained_variance(data.as_ptr(), 4, 2, 2, out.as_mut_ptr()), DlStatus::DL_OK);
            assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
            assert!(out[0] > 0.9);
            assert_eq!(dl_pca_explained_variance(data.as_ptr(), 4, 2, 3, out.as_mut_ptr()), DlStatus::DL_RANK_TOO_LOW);
        }
    }

    #[test]
    fn header_lists_every_symbol() {
        let header = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dilemma.h"));
        for sym in [
            "dl_last_error_message",
            "dl_catalog_parse",
            "dl_catalog_free",
            "dl_catalog_group_count",
            "dl_tally",
            "dl_export_stem",
            "dl_string_free",
            "dl_room_new",
            "dl_room_join",
            "dl_room_leave",
            "dl_room_member_count",
            "dl_room_free",
            "dl_pca_explained_variance",
            "typedef struct DlRoom DlRoom",
            "DL_ROOM_FULL = 4",
        ] {
            assert!(header.contains(sym), "{sym} missing from header");
        }
    }
}
