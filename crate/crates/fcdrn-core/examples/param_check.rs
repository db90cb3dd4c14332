use fcdrn_core::builder::*;
fn main() {
    for fam in [VariantFamily::P, VariantFamily::S, VariantFamily::D] {
        let cfg = BuildConfig::with_family(fam);
        let m = build::<f32>(&cfg, 0).unwrap();
        println!("{}: {}", fam, m.count_parameters());
        if fam != VariantFamily::D {
            let sd = m.surgery_to_dilated([4, 8]).unwrap();
            println!("{}: {}", sd.config.family, sd.count_parameters());
        }
    }
}
