use gplar_core::latent_prior::{chain_logdensity, joint_logdensity};
use gplar_core::samplers::{sample_parallel, sample_sequential};
use gplar_core::variational::kl_to_gp_prior;
use gplar_core::{build_gram, DiagonalPosterior, GramMatrix32, KernelSpec32, NoiseBlock, TimeGrid};
use ndarray::Array2;

#[test]
fn f32_pipeline_runs_end_to_end() {
    let spec: KernelSpec32 = KernelSpec32::rbf(0.3, 1.0).unwrap().with_nugget(0.05);
    let grid = TimeGrid::<f32>::linspace_open(12).unwrap();
    let gram: GramMatrix32 = build_gram(&spec, &grid).unwrap();

    let noise = NoiseBlock::<f32>::standard(12, 2, 4, "f32");
    let a = sample_sequential(&gram, 2, &noise).unwrap();
    let b = sample_parallel(&gram, 2, &noise).unwrap();
    assert!((a.z() - b.z()).iter().all(|d| d.abs() < 1e-4));

    let chain = chain_logdensity(&gram, &a).unwrap();
    let joint = joint_logdensity(&gram, &a).unwrap();
    assert!((chain - joint).abs() < 1e-3 * (1.0 + joint.abs()));

    let q = DiagonalPosterior::new(Array2::<f32>::zeros((12, 2)), Array2::zeros((12, 2))).unwrap();
    assert!(kl_to_gp_prior(&q, &gram).unwrap().is_finite());
}
