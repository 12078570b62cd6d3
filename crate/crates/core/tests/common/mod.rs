//! Helpers shared by the integration tests, plus the invariant checks that
//! run both as individual tests and inside the acceptance sweep.

#![allow(dead_code)]

pub mod invariants;

use darca::experiment::Dataset;
use darca::phantom::{self, DomainParams};
use darca::register::{RegConfig, Registrar};
use darca::segmodel::{LabelKind, LabeledSubject};
use darca::volgrid::{Domain, SubjectRecord};

/// Presets shrunk to 24³ at 4 mm; same field of view, much cheaper.
pub fn small_params() -> (DomainParams, DomainParams) {
    let (mut s, mut t) = phantom::presets();
    s.dims = [24; 3];
    s.spacing = [4.0; 3];
    t.dims = [24; 3];
    t.spacing = [4.0; 3];
    (s, t)
}

pub fn small_dataset(n_source: usize, n_target: usize, seed: u64) -> Dataset {
    let (s, t) = small_params();
    Dataset::phantom(&s, n_source, &t, n_target, seed).unwrap()
}

pub fn subjects(p: &DomainParams, seed: u64, n: usize, domain: Domain, prefix: &str) -> Vec<LabeledSubject> {
    phantom::generate_subjects(p, seed, n, domain, prefix)
        .unwrap()
        .into_iter()
        .map(|(r, v, m)| LabeledSubject::new(r, v, m, LabelKind::Manual).unwrap())
        .collect()
}

pub fn labeled(id: &str, p: &DomainParams, seed: u64) -> LabeledSubject {
    let (v, m) = phantom::generate_subject(p, seed).unwrap();
    LabeledSubject::new(SubjectRecord::in_memory(id, Domain::Source), v, m, LabelKind::Manual).unwrap()
}

pub fn reg() -> Registrar<'static> {
    Registrar::new(RegConfig::fast(0))
}

/// Rotation by `angle` radians about `axis` (need not be unit length).
pub fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = if n < 1e-12 { [0.0, 0.0, 1.0] } else { axis.map(|a| a / n) };
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
