//! Build an adapter bundle, round-trip it through the binary container,
//! and show what the file carries.

use lorapool::container::{bundle_to_bytes, load_bundle, save_bundle};
use lorapool::tensor::{AdapterBundle, TensorBlob};

fn main() -> lorapool::Result<()> {
    let mut bundle = AdapterBundle::new("demo-adapter");
    bundle.insert(TensorBlob::new(
        "attn.q_proj",
        vec![4, 3],
        (0..12).map(|i| (i as f32) * 0.25 - 1.5).collect(),
    )?);
    bundle.insert_scaled(
        TensorBlob::new("mlp.down", vec![2, 3], vec![0.5, -0.5, 1.0, 0.0, 0.25, -1.0])?,
        2.0,
    );

    let bytes = bundle_to_bytes(&bundle)?;
    println!("container: {} bytes for {} tensors", bytes.len(), bundle.tensors.len());

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("demo.bin");
    save_bundle(&bundle, &path)?;
    let back = load_bundle(&path)?;

    assert_eq!(back.adapter_id, bundle.adapter_id);
    for (name, tensor) in &back.tensors {
        let original = &bundle.tensors[name];
        assert_eq!(tensor.data, original.data, "{name} changed in transit");
        println!(
            "  {name}: shape {:?}, scale {}, |.|_F = {:.4}",
            tensor.shape,
            back.scaling[name],
            tensor.frobenius_norm()
        );
    }
    println!("round trip exact: every tensor loaded bit-identical");
    Ok(())
}
