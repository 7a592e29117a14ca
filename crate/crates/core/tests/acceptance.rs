mod common;

use common::Check;
use std::process::ExitCode;
use std::time::Instant;

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 9] = [
        ("1 conv oracle", common::crit1_conv_oracle),
        ("2 gradients", common::crit2_gradients),
        ("3 quantizers", common::crit3_quantizers),
        ("4 integer runtime bit-exact", common::crit4_bit_exact),
        ("5 nas extraction", common::crit5_nas_equivalence),
        ("6 deployment numbers", common::crit6_deploy),
        ("7 post-processing", common::crit7_postprocess),
        ("8 end-to-end synthetic", common::crit8_end_to_end),
        ("9 determinism", common::crit9_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let res = check();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS  criterion {name} ({secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.1}s): {msg}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
