//! fODF fields: SH basis, peak extraction, synthetic phantoms.

pub mod peaks;
pub mod phantom;
pub mod sh;
pub mod sphere;
pub mod volume;

pub use peaks::{peaks, PeakFinder, DEFAULT_REL_THRESHOLD, MAX_PEAKS};
pub use phantom::{make_phantom, Bundle, BundleShape, BundleSpec, KernelFitter, Phantom, PhantomSpec, Plane};
pub use sh::{sh_basis, sh_eval, sh_index, N_COEFFS, SH_ORDER};
pub use sphere::{fibonacci_sphere, SphereSampling};
pub use volume::{Mask, ShVolume};
