use echo_core::autodiff::Graph;
use echo_core::datamodel::{build_region_masks, MaskLayout, Rect, RegionMasks};
use echo_core::nn::{Binder, Parameters};
use echo_core::rng::{derive_seed, seeded, SeededRng};
use echo_core::sdcm::{sdcm_forward, InjectionContext, Sdcm};
use echo_core::tensor::Tensor;
use rand::Rng;

struct Instance {
    module: Sdcm,
    masks: RegionMasks,
    h: Tensor,
    avatar: Tensor,
    user: Tensor,
    kv: usize,
}

fn instance(rng: &mut SeededRng, randomize: bool) -> Instance {
    let (height, width) = (rng.random_range(4..7), rng.random_range(4..7));
    let (r0, c0) = (rng.random_range(0..height - 1), rng.random_range(0..width - 2));
    let layout = MaskLayout {
        face: Rect::new(r0, height - 1, c0, width - 1),
        lip: Rect::new(height - 1, height - 1, c0 + 1, width - 1),
    };
    let masks = build_region_masks(height, width, &layout).unwrap();
    let dim = 2 * rng.random_range(1..4);
    let (audio_dim, user_dim) = (rng.random_range(1..5), rng.random_range(1..5));
    let frames = rng.random_range(1..4);
    let kv = rng.random_range(1..4);
    let mut module = Sdcm::new(dim, audio_dim, user_dim, 2, 2, rng);
    if randomize {
        module.visit_mut("", &mut |_, t| {
            let r = Tensor::randn(t.shape(), 0.7, rng);
            t.data_mut().copy_from_slice(r.data());
        });
    }
    Instance {
        h: Tensor::randn(&[frames * masks.cells(), dim], 1.0, rng),
        avatar: Tensor::randn(&[frames * kv, audio_dim], 1.0, rng),
        user: Tensor::randn(&[frames * kv, user_dim], 1.0, rng),
        module,
        masks,
        kv,
    }
}

fn run(inst: &Instance, user: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind_frozen(&mut g, &inst.module);
    let h = g.constant(inst.h.clone());
    let avatar = g.constant(inst.avatar.clone());
    let user = g.constant(user.clone());
    let ctx = InjectionContext { avatar, user: Some(user), kv_len: inst.kv };
    let out = sdcm_forward(&mut g, &b, &inst.module, h, &ctx, &inst.masks, None, "").unwrap().out;
    g.value(out).clone()
}

#[test]
fn user_features_never_reach_lip_cells() {
    for case in 0..100u64 {
        let mut rng = seeded(derive_seed(61, case));
        let inst = instance(&mut rng, true);
        let base = run(&inst, &inst.user);
        let perturbed = Tensor::from_fn(inst.user.shape(), |i| inst.user.data()[i] + rng.random_range(0.5..2.0));
        let out = run(&inst, &perturbed);
        let (cells, dim) = (inst.masks.cells(), inst.h.dim(1));
        let mut face_changed = false;
        for r in 0..inst.h.dim(0) {
            let (a, b) = (&base.data()[r * dim..(r + 1) * dim], &out.data()[r * dim..(r + 1) * dim]);
            let cell = r % cells;
            if inst.masks.lip()[cell] || !inst.masks.face()[cell] {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "case {case}, cell {cell}");
            } else if a != b {
                face_changed = true;
            }
        }
        assert!(face_changed, "case {case}: no face cell responded");
    }
}

#[test]
fn zero_output_projections_give_identity() {
    for case in 0..100u64 {
        let mut rng = seeded(derive_seed(62, case));
        let inst = instance(&mut rng, false);
        assert_eq!(run(&inst, &inst.user), inst.h, "case {case}");
    }
}
