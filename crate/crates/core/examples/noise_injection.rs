use cmrm::noise::{inject, NoiseKind, NoiseSpec};

pub fn run_example() -> cmrm::Result<Vec<(String, usize)>> {
    let clean: Vec<usize> = (0..1000).map(|i| i % 6).collect();
    let kinds = [
        ("symmetric", NoiseKind::Symmetric),
        ("circular", NoiseKind::Circular),
        // classes {0,1,2} and {3,4,5} form two superclasses
        (
            "group_conditional",
            NoiseKind::GroupConditional {
                group_of: vec![0, 0, 0, 1, 1, 1],
            },
        ),
    ];
    let mut out = Vec::new();
    for (name, kind) in kinds {
        let spec = NoiseSpec {
            kind,
            rate: 0.2,
            seed: 7,
        };
        let (observed, mask) = inject(&clean, &spec, 6)?;
        let changed = clean.iter().zip(&observed).filter(|(a, b)| a != b).count();
        println!(
            "{name:>18}: {} flipped, {} labels differ",
            mask.count(),
            changed
        );
        out.push((name.to_string(), mask.count()));
    }

    let binary: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let spec = NoiseSpec {
        kind: NoiseKind::BinaryFlip,
        rate: 0.5,
        seed: 3,
    };
    let (observed, _) = inject(&binary, &spec, 2)?;
    println!("{:>18}: {:?} -> {:?}", "binary_flip", binary, observed);
    Ok(out)
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
