//! Fixtures shared by the criterion benches: the data matrices the CLI
//! would fit, with freshly initialized factors.

use subgoal_core::datagen::{build_data_matrix, gen_color3, gen_driving, ColorMode, GeneratorKind};
use subgoal_core::seqnmf::{init_factors, SeqNmfConfig};
use subgoal_core::{Matrix, Tensor3};

pub struct Fixture {
    pub name: &'static str,
    pub x: Matrix,
    pub mask: Vec<bool>,
    pub o: Tensor3,
    pub h: Matrix,
    pub cfg: SeqNmfConfig,
}

impl Fixture {
    fn new(name: &'static str, kind: GeneratorKind, ds: subgoal_core::datagen::Dataset) -> Fixture {
        let dm = build_data_matrix(&ds).expect("generated data builds");
        let cfg = SeqNmfConfig::for_generator(kind);
        let (d, t) = dm.x.shape();
        let (o, h) = init_factors(d, cfg.j, cfg.l, t, dm.x.mean(), 0).expect("valid dimensions");
        Fixture {
            name,
            mask: dm.mask(),
            x: dm.x,
            o,
            h,
            cfg,
        }
    }
}

/// Color-3 with 100 sequences of 30 steps (J = 3, L = 3).
pub fn color3() -> Fixture {
    let ds = gen_color3(ColorMode::Simple, 100, 30, 0.1, 0).expect("valid parameters");
    Fixture::new("color3", GeneratorKind::Color3Simple, ds)
}

/// Driving with 50 demonstrations per task (J = 5, L = 40).
pub fn driving() -> Fixture {
    let ds = gen_driving(50, 0).expect("valid parameters");
    Fixture::new("driving", GeneratorKind::Driving, ds)
}

pub fn all() -> Vec<Fixture> {
    vec![color3(), driving()]
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_are_consistent() {
        for f in super::all() {
            assert_eq!(f.x.cols(), f.h.cols());
            assert_eq!(f.mask.len(), f.x.cols());
            assert_eq!(f.o.dims(), (f.x.rows(), f.cfg.j, f.cfg.l));
        }
    }
}
