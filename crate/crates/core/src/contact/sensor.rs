use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainConfig, Wrench};

/// Applies a domain's sensor model to an ideal wrench: mounting yaw, torque
/// saturation, per-axis gain, constant bias and Gaussian noise, in that order.
pub fn sensor_transform<R: Rng + ?Sized>(w: &Wrench, domain: &DomainConfig, rng: &mut R) -> Wrench {
    let (s, c) = domain.yaw_bias_deg.to_radians().sin_cos();
    let yaw = |v: [f64; 3]| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
    let force = yaw(w.force);
    let mut torque = yaw(w.torque);
    if let Some(sat) = domain.torque_saturation {
        torque = torque.map(|t| sat * (t / sat).tanh());
    }
    let mut out = [force[0], force[1], force[2], torque[0], torque[1], torque[2]];
    for i in 0..6 {
        out[i] = out[i] * domain.gains[i] + domain.bias[i];
    }
    if domain.noise_force > 0.0 {
        let n = Normal::new(0.0, domain.noise_force).expect("validated noise level");
        for v in &mut out[..3] {
            *v += n.sample(rng);
        }
    }
    if domain.noise_torque > 0.0 {
        let n = Normal::new(0.0, domain.noise_torque).expect("validated noise level");
        for v in &mut out[3..] {
            *v += n.sample(rng);
        }
    }
    Wrench::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;

    #[test]
    fn sim_is_identity() {
        let w = Wrench::from_array([1.0, -2.0, 3.0, 40.0, -50.0, 60.0]);
        let mut rng = derive_rng(&[1]);
        assert_eq!(sensor_transform(&w, &DomainConfig::sim(), &mut rng), w);
    }

    #[test]
    fn bias_only_for_zero_wrench() {
        let mut d = DomainConfig::pseudo_real();
        d.noise_force = 0.0;
        d.noise_torque = 0.0;
        let out = sensor_transform(&Wrench::zero(), &d, &mut derive_rng(&[2]));
        assert_eq!(out.to_array(), d.bias);
    }

    #[test]
    fn saturation_bounds_torque() {
        use rand::Rng;
        let mut d = DomainConfig::pseudo_real();
        d.noise_force = 0.0;
        d.noise_torque = 0.0;
        let sat = d.torque_saturation.unwrap();
        let mut rng = derive_rng(&[3]);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.random_range(0.0..8.0));
            let w = Wrench::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0) * scale));
            let out = sensor_transform(&w, &d, &mut rng).to_array();
            for i in 3..6 {
                assert!((out[i] - d.bias[i]).abs() <= d.gains[i] * sat + 1e-9, "{w:?}");
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let d = DomainConfig::pseudo_real();
        let w = Wrench::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = sensor_transform(&w, &d, &mut derive_rng(&[4]));
        assert_eq!(a, sensor_transform(&w, &d, &mut derive_rng(&[4])));
        assert_ne!(a, sensor_transform(&w, &d, &mut derive_rng(&[5])));
    }
}
