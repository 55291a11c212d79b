//! Projects the ground features through the wide-angle camera for a few
//! poses and prints the normalized pixel coordinates.
//!
//! cargo run --example camera_features

use diffquad::dynamics::QuadState;
use diffquad::observation::{CameraConfig, FeatureSensor, LayoutConfig, NUM_FEATURES, PIXEL_LIMIT};
use diffquad::so3::axis_angle;
use nalgebra::Vector3;

fn main() -> anyhow::Result<()> {
    let sensor = FeatureSensor::new(&CameraConfig::default(), &LayoutConfig::default())?;
    let poses = [
        ("hover at 1 m", QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0))),
        ("hover at 3 m", QuadState::hover_at(Vector3::new(0.0, 0.0, 3.0))),
        ("1 m east", QuadState::hover_at(Vector3::new(1.0, 0.0, 1.0))),
        (
            "rolled 30 deg",
            QuadState { r: axis_angle(&Vector3::x(), 30f64.to_radians()), ..QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0)) },
        ),
    ];
    for (name, state) in poses {
        let f = sensor.frame(&state);
        let clamped = f.iter().filter(|v| v.abs() >= PIXEL_LIMIT).count();
        print!("{name:>14}:");
        for i in 0..NUM_FEATURES {
            print!(" ({:+.2},{:+.2})", f[2 * i], f[2 * i + 1]);
        }
        println!("  [{clamped} clamped coords]");
    }
    Ok(())
}
